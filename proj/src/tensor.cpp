#include "mabert/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

namespace mabert {

std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

std::string_view dtype_name(DType dtype) {
    return dtype == DType::Float32 ? "f32" : "f64";
}

DType parse_dtype(std::string_view name) {
    if (name == "f32" || name == "float32") return DType::Float32;
    if (name == "f64" || name == "float64") return DType::Float64;
    throw ConfigError("unknown dtype '" + std::string(name) + "' (expected f32 or f64)");
}

std::atomic<std::size_t> MemoryTracker::live_{0};
std::atomic<std::size_t> MemoryTracker::peak_{0};

void MemoryTracker::allocated(std::size_t bytes) {
    const std::size_t now = live_.fetch_add(bytes, std::memory_order_relaxed) + bytes;
    std::size_t prev = peak_.load(std::memory_order_relaxed);
    while (now > prev && !peak_.compare_exchange_weak(prev, now, std::memory_order_relaxed)) {
    }
}

void MemoryTracker::released(std::size_t bytes) {
    live_.fetch_sub(bytes, std::memory_order_relaxed);
}

std::size_t MemoryTracker::live_bytes() { return live_.load(std::memory_order_relaxed); }
std::size_t MemoryTracker::peak_bytes() { return peak_.load(std::memory_order_relaxed); }
void MemoryTracker::reset_peak() { peak_.store(live_.load()); }

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(std::move(shape)), data_(mabert::numel(shape_), fill) {
    for (auto e : shape_) {
        if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape_));
    }
}

template <typename T>
Tensor<T>::Tensor(Shape shape, Uninitialized) : shape_(std::move(shape)), data_(mabert::numel(shape_)) {
    for (auto e : shape_) {
        if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape_));
    }
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::span<const T> values) : Tensor(std::move(shape)) {
    if (values.size() != data_.size()) {
        throw DimensionError("shape " + shape_str(shape_) + " needs " + std::to_string(data_.size()) +
                             " values, got " + std::to_string(values.size()));
    }
    std::copy(values.begin(), values.end(), data_.begin());
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::initializer_list<T> values)
    : Tensor(std::move(shape), std::span<const T>(values.begin(), values.size())) {}

template <typename T>
std::size_t Tensor<T>::offset(std::initializer_list<std::size_t> index) const {
    if (index.size() != shape_.size()) {
        throw DimensionError("index rank " + std::to_string(index.size()) + " for shape " + shape_str(shape_));
    }
    std::size_t off = 0;
    std::size_t axis = 0;
    for (auto i : index) {
        if (i >= shape_[axis]) throw DimensionError("index out of range for shape " + shape_str(shape_));
        off = off * shape_[axis] + i;
        ++axis;
    }
    return off;
}

template <typename T>
T& Tensor<T>::at(std::initializer_list<std::size_t> index) {
    return data_[offset(index)];
}

template <typename T>
T Tensor<T>::at(std::initializer_list<std::size_t> index) const {
    return data_[offset(index)];
}

template <typename T>
T Tensor<T>::item() const {
    if (data_.size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const& {
    Tensor copy = *this;
    return std::move(copy).reshaped(std::move(shape));
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) && {
    if (mabert::numel(shape) != data_.size()) {
        throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    shape_ = std::move(shape);
    return std::move(*this);
}

template <typename T>
void Tensor<T>::fill(T v) {
    std::fill(data_.begin(), data_.end(), v);
}

template <typename T>
bool Tensor<T>::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError("max_abs_diff of " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
    T m = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

template class Tensor<float>;
template class Tensor<double>;
template float max_abs_diff(const Tensor<float>&, const Tensor<float>&);
template double max_abs_diff(const Tensor<double>&, const Tensor<double>&);
template class Tensor<long double>;
template long double max_abs_diff(const Tensor<long double>&, const Tensor<long double>&);

}  // namespace mabert
