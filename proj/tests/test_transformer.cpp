#include <doctest.h>

#include <random>

#include "gradcheck.hpp"
#include "msdf/transformer.hpp"
#include "msdf/vocab.hpp"
#include "reference_math.hpp"

using namespace msdf;
using namespace msdf::testing;

namespace {

ModelConfig toy_config() {
  ModelConfig c;
  c.d = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ff = 16;
  c.vocab_size = 20;
  c.max_len = 16;
  c.dropout = 0.0;
  return c;
}

// Default init is tiny; spread every parameter so the oracles see real work.
void scramble(const ParamList& params, std::uint64_t seed, double stddev = 0.4) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, stddev);
  for (const auto& p : params.items()) {
    Tensor t = p.tensor;
    for (double& x : t.mutable_data()) x = dist(rng);
  }
}

std::vector<std::vector<bool>> all_allowed_where(std::size_t rows,
                                                 const std::vector<std::uint8_t>& keep) {
  std::vector<std::vector<bool>> a(rows, std::vector<bool>(keep.size()));
  for (auto& row : a)
    for (std::size_t j = 0; j < keep.size(); ++j) row[j] = keep[j] != 0;
  return a;
}

std::vector<std::vector<bool>> causal_allowed(std::size_t n) {
  std::vector<std::vector<bool>> a(n, std::vector<bool>(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) a[i][j] = true;
  return a;
}

Mat lin(const Mat& x, const Linear& l) {
  Mat y = mm(x, to_mat(l.w));
  return l.b.defined() ? plus_row(y, to_mat(l.b)) : y;
}

Mat ln(const Mat& x, const LayerNormParams& p) { return layernorm(x, to_mat(p.gain), to_mat(p.bias)); }

Mat ffn_ref(const Mat& x, const FeedForward& f) { return lin(gelu_tanh(lin(x, f.in)), f.out); }

Mat embed_ref(const Tensor& table, const Tensor& positions, std::span<const int> ids,
              std::size_t offset = 0) {
  const Mat e = to_mat(table), p = to_mat(positions);
  Mat x(ids.size(), e.cols);
  for (std::size_t i = 0; i < ids.size(); ++i)
    for (std::size_t j = 0; j < e.cols; ++j)
      x(i, j) = e(static_cast<std::size_t>(ids[i]), j) + p(offset + i, j);
  return x;
}

Mat encoder_ref(const Encoder& enc, const Tensor& table, std::span<const int> ids) {
  std::vector<std::uint8_t> keep;
  for (int id : ids) keep.push_back(id != tok::kPad);
  const auto allowed = all_allowed_where(ids.size(), keep);
  Mat x = embed_ref(table, enc.positions, ids);
  for (const auto& b : enc.blocks) {
    const Mat n = ln(x, b.ln_attn);
    const Mat a = lin(attention(lin(n, b.attn.q), lin(n, b.attn.k), lin(n, b.attn.v),
                                b.attn.n_heads, allowed),
                      b.attn.o);
    const Mat h = plus(x, a);
    x = plus(h, ffn_ref(ln(h, b.ln_ffn), b.ffn));
  }
  return ln(x, enc.ln_final);
}

Mat cross_ref(const Mat& normed, const CrossAttention& c, const EncodedSource& src) {
  const Mat hs = to_mat(src.states);
  return attention(lin(normed, c.q), lin(hs, c.k), lin(hs, c.v), c.n_heads,
                   all_allowed_where(normed.rows, src.keep));
}

Mat decoder_block_ref(const DecoderBlock& b, const Mat& x,
                      const std::vector<const EncodedSource*>& sources) {
  const Mat n = ln(x, b.ln_self);
  const Mat a = lin(attention(lin(n, b.self_attn.q), lin(n, b.self_attn.k),
                              lin(n, b.self_attn.v), b.self_attn.n_heads, causal_allowed(x.rows)),
                    b.self_attn.o);
  const Mat h_sa = plus(x, a);
  const Mat normed = ln(h_sa, b.ln_cross);
  std::vector<Mat> parts;
  for (std::size_t s = 0; s < sources.size(); ++s) parts.push_back(cross_ref(normed, b.cross[s], *sources[s]));
  const Mat h_fa = plus(h_sa, mm(hcat(parts), to_mat(b.w_p)));
  return plus(h_fa, ffn_ref(ln(h_fa, b.ln_ffn), b.ffn));
}

struct Toy {
  ModelConfig config;
  Tensor table;
  std::shared_ptr<Encoder> history, knowledge, persona;
  Decoder decoder;
  ParamList params;

  explicit Toy(ModelConfig c, std::uint64_t seed = 5) : config(c) {
    std::mt19937_64 rng(seed);
    table = init_normal({c.vocab_size, c.d}, 0.5, rng);
    history = Encoder::make(c, rng);
    if (c.use_knowledge) knowledge = Encoder::make(c, rng);
    if (c.use_persona) persona = Encoder::make(c, rng);
    decoder = Decoder::make(c, rng);
    params.add("table", table);
    history->collect(params, "history.");
    if (knowledge) knowledge->collect(params, "knowledge.");
    if (persona) persona->collect(params, "persona.");
    decoder.collect(params, "decoder.");
    scramble(params, seed + 100);
  }

  EncodedSources encode(const std::vector<int>& h, const std::vector<int>& k,
                        const std::vector<int>& p) const {
    EncodedSources s;
    s.history = history->encode(table, h);
    if (knowledge) s.knowledge = knowledge->encode(table, k);
    if (persona) s.persona = persona->encode(table, p);
    return s;
  }
};

}  // namespace

TEST_CASE("model config validates and round-trips") {
  ModelConfig c = toy_config();
  c.use_knowledge = true;
  const auto back = ModelConfig::from_json(c.to_json());
  CHECK(back.d == c.d);
  CHECK(back.n_sources() == 2);
  CHECK(c.to_json()["n_sources"] == 2);
  ModelConfig bad = c;
  bad.n_heads = 3;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = c;
  bad.max_len = 1;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("encoder output shapes and padding") {
  Toy toy(toy_config());
  std::vector<int> one = {15};
  CHECK(toy.history->encode(toy.table, one).states.shape() == Shape{1, 8});

  // Trailing pads never change the real positions.
  std::vector<int> plain = {15, 16, 17};
  std::vector<int> padded = {15, 16, 17, tok::kPad, tok::kPad};
  const auto a = toy.history->encode(toy.table, plain);
  const auto b = toy.history->encode(toy.table, padded);
  CHECK(b.keep == std::vector<std::uint8_t>{1, 1, 1, 0, 0});
  for (std::size_t i = 0; i < 3 * 8; ++i) CHECK(a.states.data()[i] == doctest::Approx(b.states.data()[i]).epsilon(1e-12));

  std::vector<int> too_long(17, 15);
  CHECK_THROWS_AS(toy.history->encode(toy.table, too_long), std::invalid_argument);
}

TEST_CASE("encoder matches a straight-line reference") {
  Toy toy(toy_config());
  std::vector<int> ids = {15, 3, tok::kPad, 19, 4, tok::kPad};
  const auto out = toy.history->encode(toy.table, ids);
  const Mat ref = encoder_ref(*toy.history, toy.table, ids);
  CHECK(max_abs_diff(ref, out.states) < 1e-10);
}

TEST_CASE("decoder self-attention is causal and matches brute force") {
  Toy toy(toy_config());
  const auto sources = toy.encode({15, 16}, {}, {});
  const auto memory = toy.decoder.project(sources);

  std::vector<int> ids = {tok::kBos, 15, 16, 17, 18};
  const auto h = toy.decoder.forward(toy.table, ids, memory, nullptr);

  Mat x = embed_ref(toy.table, toy.decoder.positions, ids);
  for (const auto& b : toy.decoder.blocks) x = decoder_block_ref(b, x, {&sources.history});
  x = ln(x, toy.decoder.ln_final);
  CHECK(max_abs_diff(x, h) < 1e-10);

  for (std::size_t t = 0; t + 1 < ids.size(); ++t) {
    auto changed = ids;
    for (std::size_t u = t + 1; u < ids.size(); ++u) changed[u] = 19;
    const auto h2 = toy.decoder.forward(toy.table, changed, memory, nullptr);
    for (std::size_t i = 0; i <= t; ++i)
      for (std::size_t j = 0; j < 8; ++j) CHECK(h2.at(i, j) == h.at(i, j));
  }
}

TEST_CASE("single position self-attention is the value path plus residual") {
  Toy toy(toy_config());
  const auto& b = toy.decoder.blocks[0];
  std::mt19937_64 rng(3);
  auto x = random_tensor({1, 8}, rng, false);
  const auto out = b.self_attention(x, nullptr, {});
  const Mat xm = to_mat(x);
  const Mat expect = plus(xm, lin(lin(ln(xm, b.ln_self), b.self_attn.v), b.self_attn.o));
  CHECK(max_abs_diff(expect, out) < 1e-12);
}

TEST_CASE("fusion degenerate cases") {
  std::mt19937_64 rng(9);
  const std::size_t d = 8;
  auto h_sa = random_tensor({3, d}, rng, false);
  auto lnp = LayerNormParams::make(d);
  std::vector<CrossAttention> branches;
  std::vector<SourceKV> kvs;
  std::vector<EncodedSource> srcs;
  for (int s = 0; s < 3; ++s) {
    branches.push_back(CrossAttention::make(d, 2, 0.5, rng));
    EncodedSource src{random_tensor({static_cast<std::size_t>(2 + s), d}, rng, false), {}};
    src.keep.assign(src.states.dim(0), 1);
    kvs.push_back(branches.back().project(src.states, src.keep));
    srcs.push_back(src);
  }

  SUBCASE("zero projection leaves the residual") {
    auto w_p = Tensor::zeros({3 * d, d});
    const auto out = fuse_cross_attention(h_sa, lnp, branches, kvs, w_p);
    for (std::size_t i = 0; i < out.numel(); ++i) CHECK(out.data()[i] == h_sa.data()[i]);
  }
  SUBCASE("one source with identity projection is plain cross-attention") {
    std::vector<double> eye(d * d, 0.0);
    for (std::size_t i = 0; i < d; ++i) eye[i * d + i] = 1.0;
    auto w_p = Tensor::from({d, d}, eye);
    const auto out = fuse_cross_attention(h_sa, lnp, std::span(branches).first(1),
                                          std::span(kvs).first(1), w_p);
    const Mat hm = to_mat(h_sa);
    const Mat expect = plus(hm, cross_ref(ln(hm, lnp), branches[0], srcs[0]));
    CHECK(max_abs_diff(expect, out) < 1e-12);
  }
  SUBCASE("two sources equal the hand-assembled concatenation") {
    auto w_p = random_tensor({2 * d, d}, rng, false);
    const auto out = fuse_cross_attention(h_sa, lnp, std::span(branches).first(2),
                                          std::span(kvs).first(2), w_p);
    const Mat hm = to_mat(h_sa);
    const Mat n = ln(hm, lnp);
    const Mat expect =
        plus(hm, mm(hcat({cross_ref(n, branches[0], srcs[0]), cross_ref(n, branches[1], srcs[1])}),
                    to_mat(w_p)));
    CHECK(max_abs_diff(expect, out) < 1e-12);
  }
  SUBCASE("permuting slots with matching projection blocks is an identity") {
    auto w_p = random_tensor({3 * d, d}, rng, false);
    const auto out = fuse_cross_attention(h_sa, lnp, branches, kvs, w_p);
    const std::vector<std::size_t> perm = {2, 0, 1};
    std::vector<CrossAttention> pb;
    std::vector<SourceKV> pk;
    std::vector<double> pw;
    for (std::size_t s : perm) {
      pb.push_back(branches[s]);
      pk.push_back(kvs[s]);
      pw.insert(pw.end(), w_p.data().begin() + static_cast<long>(s * d * d),
                w_p.data().begin() + static_cast<long>((s + 1) * d * d));
    }
    const auto permuted = fuse_cross_attention(h_sa, lnp, pb, pk, Tensor::from({3 * d, d}, pw));
    for (std::size_t i = 0; i < out.numel(); ++i)
      CHECK(permuted.data()[i] == doctest::Approx(out.data()[i]).epsilon(1e-12));
  }
  SUBCASE("contract violations") {
    auto w_p = Tensor::zeros({2 * d, d});
    CHECK_THROWS_AS(fuse_cross_attention(h_sa, lnp, {}, {}, w_p), std::invalid_argument);
    CHECK_THROWS_AS(fuse_cross_attention(h_sa, lnp, branches, kvs, w_p), DimensionError);
  }
}

TEST_CASE("fusion projection arity follows the sources") {
  ModelConfig c = toy_config();
  Toy solo(c);
  CHECK(solo.decoder.blocks[0].w_p.shape() == Shape{c.d, c.d});
  CHECK(solo.decoder.blocks[0].cross.size() == 1);
  c.use_knowledge = true;
  c.use_persona = true;
  Toy full(c);
  CHECK(full.decoder.blocks[0].w_p.shape() == Shape{3 * c.d, c.d});
  CHECK(full.decoder.blocks[0].cross.size() == 3);
}

TEST_CASE("decoder rejects missing or unexpected sources") {
  ModelConfig c = toy_config();
  c.use_knowledge = true;
  Toy toy(c);
  EncodedSources s;
  s.history = toy.history->encode(toy.table, std::vector<int>{15});
  try {
    toy.decoder.project(s);
    FAIL("expected an error");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("knowledge") != std::string::npos);
  }
  s.knowledge = s.history;
  s.persona = s.history;
  CHECK_THROWS_AS(toy.decoder.project(s), std::invalid_argument);
}

TEST_CASE("three-source decoder matches the reference") {
  ModelConfig c = toy_config();
  c.use_knowledge = true;
  c.use_persona = true;
  Toy toy(c);
  const auto sources = toy.encode({15, 16, 17}, {18, tok::kPad, 19}, {14, 15});
  std::vector<int> ids = {tok::kBos, 17, 18, 19};
  const auto h = toy.decoder.forward(toy.table, ids, toy.decoder.project(sources), nullptr);
  Mat x = embed_ref(toy.table, toy.decoder.positions, ids);
  for (const auto& b : toy.decoder.blocks)
    x = decoder_block_ref(b, x, {&sources.history, &*sources.knowledge, &*sources.persona});
  CHECK(max_abs_diff(ln(x, toy.decoder.ln_final), h) < 1e-10);
}

TEST_CASE("decoder block residual paths and composition") {
  Toy toy(toy_config());
  const auto sources = toy.encode({15, 16}, {}, {});
  const auto memory = toy.decoder.project(sources);
  std::mt19937_64 rng(4);
  auto x = random_tensor({3, 8}, rng, false);

  SUBCASE("zeroed second FFN layer returns the fused state") {
    DecoderBlock b = toy.decoder.blocks[0];
    b.ffn.out.w = Tensor::zeros(b.ffn.out.w.shape());
    b.ffn.out.b = Tensor::zeros(b.ffn.out.b.shape());
    const auto h_sa = b.self_attention(x, nullptr, {});
    const auto h_fa = fuse_cross_attention(h_sa, b.ln_cross, b.cross, memory[0], b.w_p);
    const auto out = b.forward(x, memory[0], nullptr, {});
    for (std::size_t i = 0; i < out.numel(); ++i) CHECK(out.data()[i] == h_fa.data()[i]);
  }
  SUBCASE("the stack is block(block(x))") {
    const auto& b = toy.decoder.blocks;
    const auto twice = b[1].forward(b[0].forward(x, memory[0], nullptr, {}), memory[1], nullptr, {});
    Mat ref = to_mat(x);
    ref = decoder_block_ref(b[0], ref, {&sources.history});
    ref = decoder_block_ref(b[1], ref, {&sources.history});
    CHECK(max_abs_diff(ref, twice) < 1e-10);
  }
}

TEST_CASE("incremental decoding with the cache matches the full pass") {
  ModelConfig c = toy_config();
  c.use_knowledge = true;
  Toy toy(c);
  const auto memory = toy.decoder.project(toy.encode({15, 16}, {17, 18, 19}, {}));
  std::vector<int> ids = {tok::kBos, 15, 19, 16, 18};
  const auto full = toy.decoder.forward(toy.table, ids, memory, nullptr);
  std::vector<LayerCache> cache;
  for (std::size_t t = 0; t < ids.size(); ++t) {
    const auto step = toy.decoder.forward(toy.table, std::span(ids).subspan(t, 1), memory, &cache);
    for (std::size_t j = 0; j < 8; ++j) CHECK(step.at(0, j) == doctest::Approx(full.at(t, j)).epsilon(1e-12));
  }
  CHECK(cache[0].length() == ids.size());
}

TEST_CASE("attention rows are distributions over kept keys") {
  std::mt19937_64 rng(12);
  auto q = random_tensor({4, 6}, rng, false);
  auto k = random_tensor({5, 6}, rng, false);
  // With all-ones values every output equals the row's total attention mass.
  auto v = Tensor::full({5, 6}, 1.0);
  std::vector<std::uint8_t> keep_keys = {1, 0, 1, 1, 0};
  const auto out = multi_head_attention(q, k, v, 3, key_mask(4, keep_keys));
  for (double x : out.data()) CHECK(x == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("full forward gradient check on a toy model") {
  ModelConfig c = toy_config();
  c.use_knowledge = true;
  Toy toy(c, 21);
  std::mt19937_64 rng(22);
  auto probe = random_tensor({3, c.d}, rng, false);
  std::vector<int> ids = {tok::kBos, 15, 16};
  auto loss = [&] {
    const auto sources = toy.encode({17, 18}, {19, 15, 16}, {});
    return sum(mul(toy.decoder.forward(toy.table, ids, toy.decoder.project(sources), nullptr), probe));
  };
  const auto& blk = toy.decoder.blocks[1];
  std::vector<Tensor> checked = {toy.table,        blk.w_p,      blk.cross[1].k.w,
                                 blk.self_attn.q.w, blk.ffn.in.b, toy.knowledge->blocks[0].attn.v.w,
                                 toy.history->ln_final.gain, toy.decoder.positions};
  const auto errs = check_gradients(loss, checked);
  for (double e : errs) CHECK(e < 1e-4);
}

TEST_CASE("encoder clone owns its storage") {
  Toy toy(toy_config());
  auto copy = toy.history->clone();
  const double before = toy.history->blocks[0].attn.q.w.at(0);
  copy->blocks[0].attn.q.w.mutable_data()[0] += 1.0;
  CHECK(toy.history->blocks[0].attn.q.w.at(0) == before);
  std::vector<int> ids = {15, 16};
  Tensor t = copy->blocks[0].attn.q.w;
  t.mutable_data()[0] -= 1.0;
  const auto a = toy.history->encode(toy.table, ids);
  const auto b = copy->encode(toy.table, ids);
  for (std::size_t i = 0; i < a.states.numel(); ++i) CHECK(a.states.data()[i] == b.states.data()[i]);
}
