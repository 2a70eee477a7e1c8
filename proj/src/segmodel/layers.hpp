#pragma once

#include <string>
#include <vector>

#include "cxrinf/nn.hpp"
#include "cxrinf/segmodel.hpp"

namespace cxrinf::seg::detail {

struct Conv {
  std::size_t weight = 0;
  std::size_t bias = 0;
  int stride = 1;
  int pad = 0;

  Var operator()(ParamStore& store, Var x) const;
};

struct Dense {
  std::size_t weight = 0;
  std::size_t bias = 0;

  Var operator()(ParamStore& store, Var x) const;
};

/// Registers parameters under a hierarchical name prefix with He-uniform
/// initialization.
class Builder {
 public:
  Builder(ParamStore& store, std::uint64_t seed) : store_(store), rng_(seed) {}

  void set_group(std::string group) { group_ = std::move(group); }
  void push(const std::string& scope) { scopes_.push_back(scope); }
  void pop() { scopes_.pop_back(); }

  Conv conv(const std::string& name, int in, int out, int kernel, int stride = 1);
  Dense dense(const std::string& name, int in, int out);

 private:
  std::string qualified(const std::string& name) const;

  ParamStore& store_;
  Rng rng_;
  std::string group_ = "encoder";
  std::vector<std::string> scopes_;
};

class Scope {
 public:
  Scope(Builder& b, const std::string& name) : b_(b) { b_.push(name); }
  ~Scope() { b_.pop(); }
  Scope(const Scope&) = delete;
  Scope& operator=(const Scope&) = delete;

 private:
  Builder& b_;
};

inline Var conv_relu(const Conv& c, ParamStore& s, Var x) { return nn::relu(c(s, x)); }

/// Feature pyramid producer. Level 0 is full resolution; level i has stride
/// 2^i.
class Encoder {
 public:
  virtual ~Encoder() = default;
  virtual std::vector<Var> forward(ParamStore& store, Var x) const = 0;
  const std::vector<int>& channels() const { return channels_; }
  int levels() const { return static_cast<int>(channels_.size()) - 1; }
  virtual std::string describe() const = 0;

 protected:
  std::vector<int> channels_;
};

std::unique_ptr<Encoder> make_encoder(EncoderKind kind, Scale scale, Builder& b);

}  // namespace cxrinf::seg::detail
