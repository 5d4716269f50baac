#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "bmlab/errors.hpp"
#include "bmlab/rng.hpp"
#include "bmlab/tensor.hpp"

namespace bmlab {

// Named, insertion-ordered collection of trainable tensors plus their SGD
// momentum buffers.
class ParamSet {
 public:
  struct Entry {
    std::string name;
    Tensor value;
    std::vector<double> velocity;
  };

  explicit ParamSet(std::uint64_t seed = 0) : seed_(seed) {}

  std::uint64_t seed() const { return seed_; }

  Tensor& add(const std::string& name, Tensor t) {
    if (index_.count(name)) throw ContractError("duplicate parameter name: " + name);
    t.set_requires_grad(true);
    index_.emplace(name, entries_.size());
    entries_.push_back(Entry{name, std::move(t), {}});
    return entries_.back().value;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Tensor& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter: " + name);
    return entries_[it->second].value;
  }
  const Tensor& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter: " + name);
    return entries_[it->second].value;
  }

  std::size_t size() const { return entries_.size(); }
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.numel();
    return n;
  }

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  // Kaiming-style fan-in uniform init, U(-sqrt(6/fan_in), sqrt(6/fan_in)).
  // Each parameter draws from its own stream keyed by (seed, name), so adding
  // or removing unrelated parameters never perturbs the others.
  Tensor& add_kaiming(const std::string& name, Shape shape, std::size_t fan_in) {
    SplitMix64 rng(mix64(seed_ ^ fnv1a64(name)));
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = rng.uniform(-bound, bound);
    return add(name, Tensor(std::move(shape), std::move(v)));
  }

  Tensor& add_zeros(const std::string& name, Shape shape) {
    return add(name, Tensor(std::move(shape), 0.0));
  }

  void zero_grad() {
    for (auto& e : entries_) e.value.zero_grad();
  }

 private:
  std::uint64_t seed_;
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

inline bool is_bias(const std::string& name) {
  return name.size() >= 5 && name.compare(name.size() - 5, 5, ".bias") == 0;
}

// Reverse sweep that also guarantees every parameter ends up with a grad
// buffer: parameters the loss does not reach get zeros.
inline void backward(const Tensor& loss, ParamSet& params) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  params.zero_grad();
  backward(loss);
}

// Momentum SGD with L2 weight decay on weights (biases are exempt):
//   v <- mu*v + g + wd*theta ;  theta <- theta - lr*v
// Grads are released afterwards.
inline void sgd_step(ParamSet& params, double lr, double momentum, double weight_decay) {
  for (auto& e : params) {
    if (!e.value.has_grad()) {
      throw ContractError("sgd_step: parameter '" + e.name + "' has no gradient; run backward first");
    }
  }
  for (auto& e : params) {
    auto theta = e.value.data();
    auto g = e.value.grad();
    if (e.velocity.size() != theta.size()) e.velocity.assign(theta.size(), 0.0);
    const double wd = is_bias(e.name) ? 0.0 : weight_decay;
    for (std::size_t i = 0; i < theta.size(); ++i) {
      e.velocity[i] = momentum * e.velocity[i] + g[i] + wd * theta[i];
      theta[i] -= lr * e.velocity[i];
    }
    e.value.clear_grad();
  }
}

// ---------------------------------------------------------------------------
// Checkpoint container: "BMLAB1" then, per parameter, u64 name length, name
// bytes, u64 rank, rank x u64 extents, numel x f64 values. Little-endian.

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_f64(std::string& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

class ByteReader {
 public:
  explicit ByteReader(const std::string& buf) : buf_(buf) {}

  bool at_end() const { return pos_ == buf_.size(); }
  std::size_t pos() const { return pos_; }

  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    }
    pos_ += 8;
    return v;
  }
  double f64(const char* what) { return std::bit_cast<double>(u64(what)); }
  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n, const char* what) {
    if (buf_.size() - pos_ < n) {
      throw ParseError(std::string("checkpoint truncated while reading ") + what, 1, pos_);
    }
  }
  const std::string& buf_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline constexpr std::string_view kCheckpointMagic = "BMLAB1";

inline std::string serialize_params(const ParamSet& params) {
  std::string out(kCheckpointMagic);
  for (const auto& e : params) {
    detail::put_u64(out, e.name.size());
    out += e.name;
    detail::put_u64(out, e.value.rank());
    for (auto d : e.value.shape()) detail::put_u64(out, d);
    for (double v : e.value.data()) detail::put_f64(out, v);
  }
  return out;
}

inline void save_checkpoint(const ParamSet& params, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open checkpoint for writing: " + path.string());
  const std::string bytes = serialize_params(params);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("failed writing checkpoint: " + path.string());
}

// Parameters in file order, named as stored.
inline std::vector<std::pair<std::string, Tensor>> parse_checkpoint(const std::string& buf) {
  if (buf.compare(0, kCheckpointMagic.size(), kCheckpointMagic) != 0) {
    throw ParseError("not a checkpoint (bad magic)", 1, 0);
  }
  detail::ByteReader r(buf);
  r.bytes(kCheckpointMagic.size(), "magic");
  std::vector<std::pair<std::string, Tensor>> out;
  while (!r.at_end()) {
    const auto name_len = r.u64("name length");
    if (name_len > (1u << 16)) throw ParseError("implausible parameter name length", 1, r.pos());
    std::string name = r.bytes(name_len, "name");
    const auto rank = r.u64("rank");
    if (rank > 8) throw ParseError("implausible rank for '" + name + "'", 1, r.pos());
    Shape shape(rank);
    for (auto& d : shape) d = r.u64("extent");
    const std::size_t n = shape_numel(shape);
    if (n > (buf.size() - r.pos()) / 8) {
      throw ParseError("checkpoint truncated inside values of '" + name + "'", 1, r.pos());
    }
    std::vector<double> values(n);
    for (auto& v : values) v = r.f64("value");
    out.emplace_back(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  return out;
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open file: " + path.string());
  return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

// Overwrites the values of `params` from a checkpoint. The checkpoint must
// hold exactly the same names with the same shapes.
inline void load_checkpoint(ParamSet& params, const std::filesystem::path& path) {
  auto stored = parse_checkpoint(read_file_bytes(path));
  std::unordered_map<std::string, Tensor> by_name;
  for (auto& [n, t] : stored) by_name.emplace(n, t);
  for (auto& e : params) {
    auto it = by_name.find(e.name);
    if (it == by_name.end()) throw ShapeError("checkpoint is missing parameter '" + e.name + "'");
    if (it->second.shape() != e.value.shape()) {
      throw ShapeError("checkpoint parameter '" + e.name + "' has shape " +
                       shape_str(it->second.shape()) + ", model expects " +
                       shape_str(e.value.shape()));
    }
    std::copy(it->second.data().begin(), it->second.data().end(), e.value.data().begin());
    e.velocity.clear();
    by_name.erase(it);
  }
  if (!by_name.empty()) {
    throw ShapeError("checkpoint has parameter '" + by_name.begin()->first +
                     "' that the model does not define");
  }
}

}  // namespace bmlab
