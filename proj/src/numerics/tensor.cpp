#include "hflow/numerics/tensor.hpp"

#include "hflow/numerics/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace hflow::num {

std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
    if (shape_.size() > 4) throw ContractError("tensor rank " + std::to_string(shape_.size()) + " exceeds 4");
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_.size() > 4) throw ContractError("tensor rank " + std::to_string(shape_.size()) + " exceeds 4");
    if (shape_size(shape_) != data_.size())
        throw ContractError("tensor shape " + shape_string(shape_) + " does not match " +
                            std::to_string(data_.size()) + " values");
}

std::size_t Tensor::dim(std::size_t i) const {
    if (i >= shape_.size())
        throw ContractError("dimension " + std::to_string(i) + " out of range for shape " + shape_string(shape_));
    return shape_[i];
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

void Tensor::reshape(Shape shape) {
    if (shape_size(shape) != data_.size())
        throw ContractError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    shape_ = std::move(shape);
}

bool Tensor::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Tensor& Tensor::operator+=(const Tensor& other) {
    require_same_shape(*this, other, "operator+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
}

Tensor& Tensor::operator-=(const Tensor& other) {
    require_same_shape(*this, other, "operator-=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
    return *this;
}

Tensor& Tensor::operator*=(double s) {
    for (double& v : data_) v *= s;
    return *this;
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
    if (t.rank() != rank)
        throw ContractError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                            shape_string(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ContractError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                            shape_string(b.shape()));
}

double sum(const Tensor& t) {
    double s = 0.0;
    for (double v : t.values()) s += v;
    return s;
}

double max_abs(const Tensor& t) {
    double m = 0.0;
    for (double v : t.values()) m = std::max(m, std::abs(v));
    return m;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "max_abs_diff");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

Tensor slice_batch(const Tensor& t, std::size_t begin, std::size_t end) {
    require_rank(t, 4, "slice_batch");
    if (begin > end || end > t.n())
        throw ContractError("slice_batch: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                            ") outside batch of " + std::to_string(t.n()));
    const std::size_t item = t.c() * t.plane();
    Tensor out = Tensor::nchw(end - begin, t.c(), t.h(), t.w());
    std::copy(t.data() + begin * item, t.data() + end * item, out.data());
    return out;
}

Tensor gather_batch(const Tensor& t, std::span<const std::size_t> indices) {
    require_rank(t, 4, "gather_batch");
    const std::size_t item = t.c() * t.plane();
    Tensor out = Tensor::nchw(indices.size(), t.c(), t.h(), t.w());
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= t.n()) throw ContractError("gather_batch: index " + std::to_string(indices[i]) + " out of range");
        std::copy(t.data() + indices[i] * item, t.data() + (indices[i] + 1) * item, out.data() + i * item);
    }
    return out;
}

Tensor concat_batch(std::span<const Tensor> parts) {
    if (parts.empty()) return {};
    std::size_t n = 0;
    for (const auto& p : parts) {
        require_rank(p, 4, "concat_batch");
        if (p.c() != parts[0].c() || p.h() != parts[0].h() || p.w() != parts[0].w())
            throw ContractError("concat_batch: item shape mismatch " + shape_string(p.shape()) + " vs " +
                                shape_string(parts[0].shape()));
        n += p.n();
    }
    Tensor out = Tensor::nchw(n, parts[0].c(), parts[0].h(), parts[0].w());
    double* dst = out.data();
    for (const auto& p : parts) dst = std::copy(p.data(), p.data() + p.size(), dst);
    return out;
}

Tensor slice_channels(const Tensor& t, std::size_t begin, std::size_t end) {
    require_rank(t, 4, "slice_channels");
    if (begin > end || end > t.c())
        throw ContractError("slice_channels: range outside " + std::to_string(t.c()) + " channels");
    Tensor out = Tensor::nchw(t.n(), end - begin, t.h(), t.w());
    const std::size_t p = t.plane();
    for (std::size_t n = 0; n < t.n(); ++n)
        std::copy(t.plane_ptr(n, begin), t.plane_ptr(n, begin) + (end - begin) * p, out.plane_ptr(n, 0));
    return out;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    require_rank(a, 4, "concat_channels");
    require_rank(b, 4, "concat_channels");
    if (a.n() != b.n() || a.h() != b.h() || a.w() != b.w())
        throw ContractError("concat_channels: shape mismatch " + shape_string(a.shape()) + " vs " +
                            shape_string(b.shape()));
    Tensor out = Tensor::nchw(a.n(), a.c() + b.c(), a.h(), a.w());
    const std::size_t p = a.plane();
    for (std::size_t n = 0; n < a.n(); ++n) {
        std::copy(a.plane_ptr(n, 0), a.plane_ptr(n, 0) + a.c() * p, out.plane_ptr(n, 0));
        std::copy(b.plane_ptr(n, 0), b.plane_ptr(n, 0) + b.c() * p, out.plane_ptr(n, a.c()));
    }
    return out;
}

void add_into_channels(Tensor& dst, const Tensor& src, std::size_t begin) {
    if (src.n() != dst.n() || src.h() != dst.h() || src.w() != dst.w() || begin + src.c() > dst.c())
        throw ContractError("add_into_channels: " + shape_string(src.shape()) + " does not fit " +
                            shape_string(dst.shape()));
    const std::size_t count = src.c() * src.plane();
    for (std::size_t n = 0; n < src.n(); ++n) {
        double* d = dst.plane_ptr(n, begin);
        const double* s = src.plane_ptr(n, 0);
        for (std::size_t i = 0; i < count; ++i) d[i] += s[i];
    }
}

} // namespace hflow::num
