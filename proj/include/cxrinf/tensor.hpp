#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace cxrinf {

/// Row-major 2-D field of doubles (images, masks, probability maps).
using Grid = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Shape {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  std::size_t numel() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

/// Dense NCHW tensor of doubles. Value semantics.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  double& at(int n, int c, int h, int w) {
    return data_[index(n, c, h, w)];
  }
  double at(int n, int c, int h, int w) const {
    return data_[index(n, c, h, w)];
  }

  void fill(double v);
  void add_inplace(const Tensor& other);
  double sum() const;

  /// Copy of sample `n`, channel `c` as a grid.
  Grid plane(int n, int c) const;
  void set_plane(int n, int c, const Grid& g);

 private:
  std::size_t index(int n, int c, int h, int w) const {
    return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + h) *
               shape_.w +
           w;
  }

  Shape shape_;
  std::vector<double> data_;
};

/// Stack single-channel grids into an N x 1 x H x W tensor.
Tensor stack_planes(std::span<const Grid> planes);

}  // namespace cxrinf
