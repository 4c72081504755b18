#include "msdf/params.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace msdf {

void ParamList::add(std::string name, const Tensor& t) {
  for (const auto& p : items_) {
    if (p.tensor.node() == t.node()) return;
  }
  items_.push_back({std::move(name), t});
}

std::vector<Tensor> ParamList::tensors() const {
  std::vector<Tensor> out;
  out.reserve(items_.size());
  for (const auto& p : items_) out.push_back(p.tensor);
  return out;
}

const Tensor* ParamList::find(const std::string& name) const {
  for (const auto& p : items_) {
    if (p.name == name) return &p.tensor;
  }
  return nullptr;
}

std::size_t ParamList::total_size() const {
  std::size_t n = 0;
  for (const auto& p : items_) n += p.tensor.numel();
  return n;
}

Tensor init_normal(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = dist(rng);
  return Tensor::from(std::move(shape), std::move(v), true);
}

Tensor init_zeros(Shape shape) { return Tensor::zeros(std::move(shape), true); }
Tensor init_ones(Shape shape) { return Tensor::full(std::move(shape), 1.0, true); }

std::vector<std::string> copy_matching(const ParamList& src, ParamList& dst) {
  std::vector<std::string> copied;
  for (const auto& d : dst.items()) {
    const Tensor* s = src.find(d.name);
    if (s == nullptr || s->shape() != d.tensor.shape()) continue;
    Tensor target = d.tensor;
    std::copy(s->data().begin(), s->data().end(), target.mutable_data().begin());
    copied.push_back(d.name);
  }
  return copied;
}

// --- checkpoint ---------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'M', 'S', 'D', 'F', 'C', 'K', 'P', 'T'};

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

template <typename T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("checkpoint truncated");
  return v;
}

}  // namespace

void Checkpoint::add_params(const ParamList& params, const std::string& prefix) {
  for (const auto& p : params.items()) {
    tensors.push_back({prefix + p.name, p.tensor.shape(),
                       std::vector<double>(p.tensor.data().begin(), p.tensor.data().end())});
  }
}

void Checkpoint::load_into(ParamList& params, const std::string& prefix) const {
  for (const auto& p : params.items()) {
    const CheckpointTensor* t = find(prefix + p.name);
    if (t == nullptr) throw std::runtime_error("checkpoint lacks tensor '" + prefix + p.name + "'");
    if (t->shape != p.tensor.shape()) {
      throw std::runtime_error("checkpoint tensor '" + prefix + p.name + "' has shape " +
                               shape_str(t->shape) + ", model expects " +
                               shape_str(p.tensor.shape()));
    }
    Tensor target = p.tensor;
    std::copy(t->values.begin(), t->values.end(), target.mutable_data().begin());
  }
}

const CheckpointTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

void Checkpoint::save(const std::filesystem::path& path) const {
  nlohmann::json header;
  header["meta"] = meta;
  header["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& t : tensors) {
    header["tensors"].push_back({{"name", t.name}, {"shape", t.shape}, {"offset", offset}});
    offset += t.values.size();
  }
  const std::string text = header.dump();
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path.string());
  os.write(kMagic, sizeof(kMagic));
  write_pod(os, kVersion);
  write_pod(os, static_cast<std::uint64_t>(text.size()));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& t : tensors) {
    os.write(reinterpret_cast<const char*>(t.values.data()),
             static_cast<std::streamsize>(t.values.size() * sizeof(double)));
  }
  if (!os) throw std::runtime_error("failed writing checkpoint: " + path.string());
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint: " + path.string());
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error("not an msdf checkpoint: " + path.string());
  }
  const auto version = read_pod<std::uint32_t>(is);
  if (version != kVersion) {
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  }
  const auto header_len = read_pod<std::uint64_t>(is);
  std::string text(header_len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(header_len));
  if (!is) throw std::runtime_error("checkpoint header truncated");
  const auto header = nlohmann::json::parse(text);
  Checkpoint ck;
  ck.meta = header.at("meta");
  for (const auto& entry : header.at("tensors")) {
    CheckpointTensor t;
    t.name = entry.at("name").get<std::string>();
    t.shape = entry.at("shape").get<Shape>();
    t.values.resize(shape_numel(t.shape));
    is.read(reinterpret_cast<char*>(t.values.data()),
            static_cast<std::streamsize>(t.values.size() * sizeof(double)));
    if (!is) throw std::runtime_error("checkpoint payload truncated at '" + t.name + "'");
    ck.tensors.push_back(std::move(t));
  }
  return ck;
}

}  // namespace msdf
