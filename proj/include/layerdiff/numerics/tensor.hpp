#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace layerdiff {

/// Raised when tensor shapes do not satisfy an operation's contract.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

using Shape = std::vector<std::int64_t>;

/// 64-byte aligned allocation. Vectorised kernels pick their code path from
/// the buffer address, so a fixed alignment keeps results bit-reproducible.
template <typename T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t kAlignment{64};

    AlignedAllocator() = default;
    template <typename U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlignment)); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlignment); }

    template <typename U>
    bool operator==(const AlignedAllocator<U>&) const noexcept {
        return true;
    }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

inline std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

/// Dense row-major tensor with value semantics.
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)) {
        for (auto d : shape_) {
            if (d <= 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape_));
        }
        data_.assign(static_cast<std::size_t>(shape_numel(shape_)), fill);
    }

    Tensor(Shape shape, const std::vector<T>& data) : Tensor(std::move(shape), AlignedVector<T>(data.begin(), data.end())) {}

    Tensor(Shape shape, AlignedVector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        for (auto d : shape_) {
            if (d <= 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape_));
        }
        if (static_cast<std::int64_t>(data_.size()) != shape_numel(shape_)) {
            throw ShapeError("element count " + std::to_string(data_.size()) + " does not match shape " +
                             shape_str(shape_));
        }
    }

    static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

    const Shape& shape() const { return shape_; }
    std::int64_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::span<T> values() { return data_; }
    std::span<const T> values() const { return data_; }
    AlignedVector<T>& storage() { return data_; }
    const AlignedVector<T>& storage() const { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    T& at4(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) {
        return data_[static_cast<std::size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
    }
    const T& at4(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
        return data_[static_cast<std::size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
    }
    T& at3(std::int64_t c, std::int64_t h, std::int64_t w) {
        return data_[static_cast<std::size_t>((c * shape_[1] + h) * shape_[2] + w)];
    }
    const T& at3(std::int64_t c, std::int64_t h, std::int64_t w) const {
        return data_[static_cast<std::size_t>((c * shape_[1] + h) * shape_[2] + w)];
    }

    Tensor reshaped(Shape shape) const {
        if (shape_numel(shape) != shape_numel(shape_)) {
            throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
        }
        return Tensor(std::move(shape), data_);
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
    }

    template <typename U>
    Tensor<U> cast() const {
        AlignedVector<U> out(data_.begin(), data_.end());
        return Tensor<U>(shape_, std::move(out));
    }

    bool operator==(const Tensor& other) const = default;

private:
    Shape shape_;
    AlignedVector<T> data_;
};

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) throw ShapeError("max_abs_diff: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    T m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

template <typename T>
double tensor_mean(const Tensor<T>& a) {
    double s = 0;
    for (auto v : a.values()) s += v;
    return s / static_cast<double>(a.size());
}

template <typename T>
double tensor_stddev(const Tensor<T>& a) {
    const double m = tensor_mean(a);
    double s = 0;
    for (auto v : a.values()) s += (v - m) * (v - m);
    return std::sqrt(s / static_cast<double>(a.size()));
}

/// Copies sample `n` of a [N,...] tensor into a tensor of shape [...].
template <typename T>
Tensor<T> take_sample(const Tensor<T>& batch, std::int64_t n) {
    Shape inner(batch.shape().begin() + 1, batch.shape().end());
    const auto stride = shape_numel(inner);
    std::vector<T> out(batch.data() + n * stride, batch.data() + (n + 1) * stride);
    return Tensor<T>(std::move(inner), std::move(out));
}

/// Stacks equally-shaped tensors along a new leading axis.
template <typename T>
Tensor<T> stack(std::span<const Tensor<T>> items) {
    if (items.empty()) throw ShapeError("stack: no items");
    Shape shape = items.front().shape();
    shape.insert(shape.begin(), static_cast<std::int64_t>(items.size()));
    std::vector<T> out;
    out.reserve(static_cast<std::size_t>(shape_numel(shape)));
    for (const auto& t : items) {
        if (t.shape() != items.front().shape()) throw ShapeError("stack: mismatched item shapes");
        out.insert(out.end(), t.values().begin(), t.values().end());
    }
    return Tensor<T>(std::move(shape), std::move(out));
}

}  // namespace layerdiff
