#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace hflow::num {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major tensor of doubles, rank 0..4.
///
/// Rank-4 tensors follow the batch x channel x height x width layout used by
/// every image operation in the library.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor nchw(std::size_t n, std::size_t c, std::size_t h, std::size_t w, double fill = 0.0) {
        return Tensor({n, c, h, w}, fill);
    }
    static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    std::size_t dim(std::size_t i) const;

    // NCHW accessors; only valid for rank-4 tensors.
    std::size_t n() const { return dim(0); }
    std::size_t c() const { return dim(1); }
    std::size_t h() const { return dim(2); }
    std::size_t w() const { return dim(3); }
    std::size_t plane() const { return dim(2) * dim(3); }

    double* data() noexcept { return data_.data(); }
    const double* data() const noexcept { return data_.data(); }
    std::span<double> values() noexcept { return data_; }
    std::span<const double> values() const noexcept { return data_; }
    std::vector<double>& storage() noexcept { return data_; }
    const std::vector<double>& storage() const noexcept { return data_; }

    double& operator[](std::size_t i) noexcept { return data_[i]; }
    double operator[](std::size_t i) const noexcept { return data_[i]; }

    double& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) noexcept {
        return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }
    double at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const noexcept {
        return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }

    // Pointer to the (n, c) image plane of a rank-4 tensor.
    double* plane_ptr(std::size_t n, std::size_t c) noexcept { return data_.data() + (n * shape_[1] + c) * plane(); }
    const double* plane_ptr(std::size_t n, std::size_t c) const noexcept {
        return data_.data() + (n * shape_[1] + c) * plane();
    }

    void fill(double v);
    void reshape(Shape shape);
    bool all_finite() const noexcept;

    Tensor& operator+=(const Tensor& other);
    Tensor& operator-=(const Tensor& other);
    Tensor& operator*=(double s);

    bool operator==(const Tensor& other) const = default;

private:
    Shape shape_;
    std::vector<double> data_;
};

// Shape assertion helpers; throw ContractError naming the operation.
void require_rank(const Tensor& t, std::size_t rank, const char* op);
void require_same_shape(const Tensor& a, const Tensor& b, const char* op);

double sum(const Tensor& t);
double max_abs(const Tensor& t);
double max_abs_diff(const Tensor& a, const Tensor& b);

// Slice batch items [begin, end) out of a rank-4 tensor.
Tensor slice_batch(const Tensor& t, std::size_t begin, std::size_t end);
// Gather batch items by index.
Tensor gather_batch(const Tensor& t, std::span<const std::size_t> indices);
// Concatenate rank-4 tensors along the batch axis.
Tensor concat_batch(std::span<const Tensor> parts);
// Channel slice [begin, end) and concatenation along channels.
Tensor slice_channels(const Tensor& t, std::size_t begin, std::size_t end);
Tensor concat_channels(const Tensor& a, const Tensor& b);
// Accumulate `src` into channels [begin, begin + src.c()) of `dst`.
void add_into_channels(Tensor& dst, const Tensor& src, std::size_t begin);

} // namespace hflow::num
