#include "cxrinf/tensor.hpp"

#include <numeric>
#include <stdexcept>

namespace cxrinf {

std::string Shape::str() const {
  return "(" + std::to_string(n) + "," + std::to_string(c) + "," +
         std::to_string(h) + "," + std::to_string(w) + ")";
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(shape), data_(shape.numel(), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(shape), data_(std::move(data)) {
  if (data_.size() != shape_.numel()) {
    throw std::invalid_argument("tensor data size does not match shape " +
                                shape_.str());
  }
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

void Tensor::add_inplace(const Tensor& other) {
  if (!(other.shape_ == shape_)) {
    throw std::invalid_argument("shape mismatch in add_inplace: " +
                                shape_.str() + " vs " + other.shape_.str());
  }
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
}

double Tensor::sum() const {
  return std::accumulate(data_.begin(), data_.end(), 0.0);
}

Grid Tensor::plane(int n, int c) const {
  Grid g(shape_.h, shape_.w);
  const double* src = data_.data() + index(n, c, 0, 0);
  std::copy(src, src + shape_.plane(), g.data());
  return g;
}

void Tensor::set_plane(int n, int c, const Grid& g) {
  if (g.rows() != shape_.h || g.cols() != shape_.w) {
    throw std::invalid_argument("plane size mismatch");
  }
  std::copy(g.data(), g.data() + shape_.plane(), data_.data() + index(n, c, 0, 0));
}

Tensor stack_planes(std::span<const Grid> planes) {
  if (planes.empty()) throw std::invalid_argument("stack_planes: empty input");
  const auto h = static_cast<int>(planes.front().rows());
  const auto w = static_cast<int>(planes.front().cols());
  Tensor t({static_cast<int>(planes.size()), 1, h, w});
  for (std::size_t i = 0; i < planes.size(); ++i) {
    t.set_plane(static_cast<int>(i), 0, planes[i]);
  }
  return t;
}

}  // namespace cxrinf
