#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "msdf/tensor.hpp"

namespace msdf {

struct NamedParam {
  std::string name;
  Tensor tensor;
};

// Ordered, de-duplicated view of a model's trainable tensors. A tensor shared
// between two modules appears once, under the name it was first added with.
class ParamList {
 public:
  void add(std::string name, const Tensor& t);
  const std::vector<NamedParam>& items() const { return items_; }
  std::vector<Tensor> tensors() const;
  const Tensor* find(const std::string& name) const;
  std::size_t total_size() const;

 private:
  std::vector<NamedParam> items_;
};

// Initializers. All draw from the caller's generator so model construction is
// reproducible from one seed.
Tensor init_normal(Shape shape, double stddev, std::mt19937_64& rng);
Tensor init_zeros(Shape shape);
Tensor init_ones(Shape shape);

// Copies values of every parameter in `src` whose name exists in `dst` with an
// identical shape. Returns the names that were copied.
std::vector<std::string> copy_matching(const ParamList& src, ParamList& dst);

// --- checkpoint container ---------------------------------------------------
//
// Layout (all integers little-endian):
//   bytes 0..7   magic "MSDFCKPT"
//   u32          format version (currently 1)
//   u64          header length H
//   H bytes      UTF-8 JSON header: {"meta": {...}, "tensors": [{"name",
//                "shape", "offset"}...]}; offsets count f64 elements
//   payload      raw IEEE-754 binary64 values, tensors back to back
//
// Values are written as raw bytes, so save → load is bit-exact.

struct CheckpointTensor {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;
  nlohmann::json meta = nlohmann::json::object();
  std::vector<CheckpointTensor> tensors;

  void add_params(const ParamList& params, const std::string& prefix = "");
  // Loads every parameter of `params` from tensors named prefix+name. Throws
  // std::runtime_error on a missing name or shape mismatch.
  void load_into(ParamList& params, const std::string& prefix = "") const;
  const CheckpointTensor* find(const std::string& name) const;

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);
};

}  // namespace msdf
