#pragma once

// Pointer-generator output layer: a vocabulary softmax mixed with attention
// mass copied from knowledge tokens.

#include <cstdint>
#include <random>
#include <span>
#include <string>

#include "msdf/params.hpp"
#include "msdf/tensor.hpp"

namespace msdf {

struct CopyHeadParams {
  Tensor w_q;    // [d×d]
  Tensor w_k;    // [d×d]
  Tensor w_mlp;  // [2d×1]

  static CopyHeadParams make(std::size_t d, double stddev, std::mt19937_64& rng);
  void collect(ParamList& params, const std::string& prefix) const;
};

// softmax(H^D W^LM); w_lm is [d×V].
Tensor vocab_distribution(const Tensor& h_d, const Tensor& w_lm);
// Same with the LM head tied to a [V×d] token table: softmax(H^D Eᵀ).
Tensor vocab_distribution_tied(const Tensor& h_d, const Tensor& token_table);

// softmax((H^D W^Q)(H^K W^K)ᵀ) over knowledge positions with keep != 0.
Tensor copy_attention(const Tensor& h_d, const Tensor& h_knowledge,
                      std::span<const std::uint8_t> keep, const CopyHeadParams& p);

// sigmoid([A_copy H^K ; H^D] W^mlp), one gate per decoding position.
Tensor generation_gate(const Tensor& a_copy, const Tensor& h_knowledge, const Tensor& h_d,
                       const CopyHeadParams& p);

inline constexpr double kLogFloor = 1e-12;

// log(p_gen·P_vocab + (1 − p_gen)·Σ_{i: ids[i]=w} A_copy[:, i]), clamped
// below at kLogFloor. Throws IndexError for an id outside [0, V).
Tensor merge_distributions(const Tensor& p_vocab, const Tensor& a_copy, const Tensor& p_gen,
                           std::span<const int> knowledge_ids);

}  // namespace msdf
