#include "msdf/word_vectors.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>

#include "msdf/vocab.hpp"

namespace msdf {
namespace {

bool is_space_token(const std::string& t) {
  return t == " " || t == "\t" || t == "\n" || t == "\r";
}

std::vector<std::string> content_tokens(const std::string& text) {
  std::vector<std::string> out;
  for (auto& t : split_tokens(text)) {
    if (!is_space_token(t)) out.push_back(std::move(t));
  }
  return out;
}

double sigm(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

WordVectors WordVectors::train(std::span<const std::vector<std::string>> sentences,
                               const WordVectorConfig& config) {
  // Index tokens in sorted order so ids do not depend on hash iteration.
  std::map<std::string, std::size_t> counts;
  for (const auto& s : sentences)
    for (const auto& t : s) ++counts[t];
  std::vector<std::string> words;
  std::vector<double> unigram;
  std::map<std::string, std::size_t> index;
  for (const auto& [w, c] : counts) {
    index[w] = words.size();
    words.push_back(w);
    unigram.push_back(std::pow(static_cast<double>(c), 0.75));
  }
  WordVectors wv;
  wv.dim_ = config.dim;
  if (words.empty()) return wv;

  const std::size_t n = words.size(), d = config.dim;
  std::mt19937_64 rng(config.seed);
  std::uniform_real_distribution<double> init(-0.5 / static_cast<double>(d),
                                              0.5 / static_cast<double>(d));
  std::vector<double> in(n * d), out(n * d, 0.0);
  for (double& x : in) x = init(rng);
  std::discrete_distribution<std::size_t> noise(unigram.begin(), unigram.end());

  std::vector<double> grad(d);
  const double total_epochs = static_cast<double>(std::max<std::size_t>(config.epochs, 1));
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = config.lr * (1.0 - static_cast<double>(epoch) / total_epochs);
    for (const auto& s : sentences) {
      for (std::size_t i = 0; i < s.size(); ++i) {
        const std::size_t center = index.at(s[i]);
        const std::size_t lo = i >= config.window ? i - config.window : 0;
        const std::size_t hi = std::min(s.size(), i + config.window + 1);
        for (std::size_t j = lo; j < hi; ++j) {
          if (j == i) continue;
          const std::size_t ctx = index.at(s[j]);
          std::fill(grad.begin(), grad.end(), 0.0);
          double* vin = in.data() + center * d;
          for (std::size_t k = 0; k <= config.negatives; ++k) {
            const std::size_t target = k == 0 ? ctx : noise(rng);
            if (k > 0 && target == ctx) continue;
            const double label = k == 0 ? 1.0 : 0.0;
            double* vout = out.data() + target * d;
            double dotv = 0.0;
            for (std::size_t q = 0; q < d; ++q) dotv += vin[q] * vout[q];
            const double g = lr * (label - sigm(dotv));
            for (std::size_t q = 0; q < d; ++q) {
              grad[q] += g * vout[q];
              vout[q] += g * vin[q];
            }
          }
          for (std::size_t q = 0; q < d; ++q) vin[q] += grad[q];
        }
      }
    }
  }
  for (std::size_t w = 0; w < n; ++w) {
    wv.vectors_.emplace(words[w], std::vector<double>(in.begin() + static_cast<long>(w * d),
                                                      in.begin() + static_cast<long>((w + 1) * d)));
  }
  return wv;
}

WordVectors WordVectors::train_on_text(std::span<const std::string> sentences,
                                       const WordVectorConfig& config) {
  std::vector<std::vector<std::string>> tokenized;
  tokenized.reserve(sentences.size());
  for (const auto& s : sentences) tokenized.push_back(content_tokens(s));
  return train(tokenized, config);
}

const std::vector<double>* WordVectors::find(const std::string& token) const {
  auto it = vectors_.find(token);
  return it == vectors_.end() ? nullptr : &it->second;
}

std::optional<std::vector<double>> WordVectors::mean_vector(
    std::span<const std::string> tokens) const {
  std::vector<double> acc(dim_, 0.0);
  std::size_t known = 0;
  for (const auto& t : tokens) {
    const auto* v = find(t);
    if (v == nullptr) continue;
    for (std::size_t q = 0; q < dim_; ++q) acc[q] += (*v)[q];
    ++known;
  }
  if (known == 0) return std::nullopt;
  for (double& x : acc) x /= static_cast<double>(known);
  return acc;
}

std::optional<std::vector<double>> WordVectors::mean_vector_of(const std::string& text) const {
  return mean_vector(content_tokens(text));
}

double cosine(std::span<const double> a, std::span<const double> b) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0.0 || bb == 0.0) return 0.0;
  return ab / std::sqrt(aa * bb);
}

}  // namespace msdf
