#include "msdf/copy_head.hpp"

#include <string>

namespace msdf {

CopyHeadParams CopyHeadParams::make(std::size_t d, double stddev, std::mt19937_64& rng) {
  CopyHeadParams p;
  p.w_q = init_normal({d, d}, stddev, rng);
  p.w_k = init_normal({d, d}, stddev, rng);
  p.w_mlp = init_normal({2 * d, 1}, stddev, rng);
  return p;
}

void CopyHeadParams::collect(ParamList& params, const std::string& prefix) const {
  params.add(prefix + "w_q", w_q);
  params.add(prefix + "w_k", w_k);
  params.add(prefix + "w_mlp", w_mlp);
}

Tensor vocab_distribution(const Tensor& h_d, const Tensor& w_lm) {
  return softmax(matmul(h_d, w_lm), 1);
}

Tensor vocab_distribution_tied(const Tensor& h_d, const Tensor& token_table) {
  return softmax(matmul_nt(h_d, token_table), 1);
}

Tensor copy_attention(const Tensor& h_d, const Tensor& h_knowledge,
                      std::span<const std::uint8_t> keep, const CopyHeadParams& p) {
  const std::size_t rows = h_d.dim(0), n = h_knowledge.dim(0);
  if (keep.size() != n) {
    throw DimensionError("copy_attention: mask of " + std::to_string(keep.size()) + " for " +
                         std::to_string(n) + " knowledge positions");
  }
  std::vector<std::uint8_t> mask;
  mask.reserve(rows * n);
  for (std::size_t i = 0; i < rows; ++i) mask.insert(mask.end(), keep.begin(), keep.end());
  const Tensor scores = matmul_nt(matmul(h_d, p.w_q), matmul(h_knowledge, p.w_k));
  return masked_softmax(scores, mask);
}

Tensor generation_gate(const Tensor& a_copy, const Tensor& h_knowledge, const Tensor& h_d,
                       const CopyHeadParams& p) {
  const Tensor context = matmul(a_copy, h_knowledge);
  std::vector<Tensor> parts{context, h_d};
  return sigmoid(matmul(concat_last(parts), p.w_mlp));
}

Tensor merge_distributions(const Tensor& p_vocab, const Tensor& a_copy, const Tensor& p_gen,
                           std::span<const int> knowledge_ids) {
  const std::size_t vocab = p_vocab.dim(1);
  if (a_copy.dim(0) != p_vocab.dim(0) || a_copy.dim(1) != knowledge_ids.size() ||
      p_gen.dim(0) != p_vocab.dim(0)) {
    throw DimensionError("merge_distributions: P_vocab " + shape_str(p_vocab.shape()) +
                         ", A_copy " + shape_str(a_copy.shape()) + ", p_gen " +
                         shape_str(p_gen.shape()) + ", " + std::to_string(knowledge_ids.size()) +
                         " knowledge ids");
  }
  const Tensor copied = index_add_cols(a_copy, knowledge_ids, vocab);
  const Tensor mixed = add(mul_rows(p_vocab, p_gen), mul_rows(copied, affine(p_gen, -1.0, 1.0)));
  return log_clamped(mixed, kLogFloor);
}

}  // namespace msdf
