#include "layers.hpp"

#include <cmath>

namespace cxrinf::seg::detail {

Var Conv::operator()(ParamStore& store, Var x) const {
  Graph& g = *x->graph;
  return nn::conv2d(x, g.parameter(store.at(weight)), g.parameter(store.at(bias)), stride, pad);
}

Var Dense::operator()(ParamStore& store, Var x) const {
  Graph& g = *x->graph;
  return nn::linear(x, g.parameter(store.at(weight)), g.parameter(store.at(bias)));
}

std::string Builder::qualified(const std::string& name) const {
  std::string out = group_;
  for (const auto& s : scopes_) out += "/" + s;
  return out + "/" + name;
}

Conv Builder::conv(const std::string& name, int in, int out, int kernel, int stride) {
  Conv c;
  c.stride = stride;
  c.pad = kernel / 2;
  const double limit = std::sqrt(6.0 / (in * kernel * kernel));
  c.weight = store_.add(qualified(name) + "/w", group_, {out, in, kernel, kernel}, limit, rng_);
  c.bias = store_.add(qualified(name) + "/b", group_, {out, 1, 1, 1}, 0.0, rng_);
  return c;
}

Dense Builder::dense(const std::string& name, int in, int out) {
  Dense d;
  const double limit = std::sqrt(6.0 / (in + out));
  d.weight = store_.add(qualified(name) + "/w", group_, {out, in, 1, 1}, limit, rng_);
  d.bias = store_.add(qualified(name) + "/b", group_, {out, 1, 1, 1}, 0.0, rng_);
  return d;
}

}  // namespace cxrinf::seg::detail
