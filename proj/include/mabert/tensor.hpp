#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mabert/errors.hpp"

namespace mabert {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

enum class DType { Float32, Float64 };

std::string_view dtype_name(DType dtype);
DType parse_dtype(std::string_view name);

template <typename T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() { return DType::Float32; }
template <>
constexpr DType dtype_of<double>() { return DType::Float64; }

// Process-wide accounting of live tensor buffers; the peak is the working-set
// estimate reported by the scaling benchmark.
class MemoryTracker {
public:
    static void allocated(std::size_t bytes);
    static void released(std::size_t bytes);
    static std::size_t live_bytes();
    static std::size_t peak_bytes();
    // Resets the high-water mark to the current live size.
    static void reset_peak();

private:
    static std::atomic<std::size_t> live_;
    static std::atomic<std::size_t> peak_;
};

template <typename T>
struct TrackingAllocator {
    using value_type = T;

    TrackingAllocator() noexcept = default;
    template <typename U>
    TrackingAllocator(const TrackingAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) {
        MemoryTracker::allocated(n * sizeof(T));
        return std::allocator<T>{}.allocate(n);
    }
    void deallocate(T* p, std::size_t n) noexcept {
        MemoryTracker::released(n * sizeof(T));
        std::allocator<T>{}.deallocate(p, n);
    }

    // Value-initializes only when asked to, so sized construction can skip the fill.
    template <typename U, typename... Args>
    void construct(U* p, Args&&... args) {
        if constexpr (sizeof...(Args) == 0) {
            ::new (static_cast<void*>(p)) U;
        } else {
            ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
        }
    }

    template <typename U>
    bool operator==(const TrackingAllocator<U>&) const noexcept { return true; }
};

// Tag for tensors whose every element is written before it is read.
struct Uninitialized {};

// Dense row-major array. A default-constructed tensor is a 0-d scalar zero.
template <typename T>
class Tensor {
public:
    using value_type = T;
    using Storage = std::vector<T, TrackingAllocator<T>>;

    Tensor() : data_(1, T(0)) {}
    explicit Tensor(Shape shape, T fill = T(0));
    Tensor(Shape shape, Uninitialized);
    Tensor(Shape shape, std::span<const T> values);
    Tensor(Shape shape, std::initializer_list<T> values);

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
    static Tensor ones(Shape shape) { return Tensor(std::move(shape), T(1)); }
    static Tensor scalar(T v) {
        Tensor t;
        t.data_[0] = v;
        return t;
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t ndim() const noexcept { return shape_.size(); }
    std::size_t numel() const noexcept { return data_.size(); }
    std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
    // Extent of the last axis (1 for scalars).
    std::size_t last() const noexcept { return shape_.empty() ? 1 : shape_.back(); }

    std::span<T> values() noexcept { return {data_.data(), data_.size()}; }
    std::span<const T> values() const noexcept { return {data_.data(), data_.size()}; }
    T* data() noexcept { return data_.data(); }
    const T* data() const noexcept { return data_.data(); }

    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }
    T& at(std::initializer_list<std::size_t> index);
    T at(std::initializer_list<std::size_t> index) const;
    T item() const;

    // Same buffer under a new shape of equal element count.
    Tensor reshaped(Shape shape) const&;
    Tensor reshaped(Shape shape) &&;

    void fill(T v);
    bool all_finite() const noexcept;

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    std::size_t offset(std::initializer_list<std::size_t> index) const;

    Shape shape_;
    Storage data_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;

// Element-type conversion (used when a float64 oracle checks a float32 path).
template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& src) {
    Tensor<To> out(src.shape());
    for (std::size_t i = 0; i < src.numel(); ++i) out[i] = static_cast<To>(src[i]);
    return out;
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b);

}  // namespace mabert
