#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace msdf {

struct WordVectorConfig {
  std::size_t dim = 32;
  std::size_t window = 2;
  std::size_t epochs = 5;
  std::size_t negatives = 5;
  double lr = 0.025;
  std::uint64_t seed = 1;
};

// Skip-gram with negative sampling over tokenized sentences. Only needs to
// give a coarse similarity signal for persona filtering.
class WordVectors {
 public:
  static WordVectors train(std::span<const std::vector<std::string>> sentences,
                           const WordVectorConfig& config);
  // Tokenizes with split_tokens and skips whitespace tokens.
  static WordVectors train_on_text(std::span<const std::string> sentences,
                                   const WordVectorConfig& config);

  std::size_t dim() const { return dim_; }
  std::size_t size() const { return vectors_.size(); }
  const std::vector<double>* find(const std::string& token) const;
  // Mean of the known tokens' vectors; nullopt when none are known.
  std::optional<std::vector<double>> mean_vector(std::span<const std::string> tokens) const;
  std::optional<std::vector<double>> mean_vector_of(const std::string& text) const;

 private:
  std::size_t dim_ = 0;
  std::unordered_map<std::string, std::vector<double>> vectors_;
};

double cosine(std::span<const double> a, std::span<const double> b);

}  // namespace msdf
