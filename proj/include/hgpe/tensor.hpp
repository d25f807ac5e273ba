#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace hgpe {

// Axis semantics used by shape traces and sanity checks.
enum class Axis : uint8_t { Batch, Channel, Height, Width, Token, Any };

inline std::string dims_str(const std::vector<int64_t>& dims) {
    std::string s = "[";
    for (size_t i = 0; i < dims.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(dims[i]);
    }
    return s + "]";
}

// Tagged shape. Tags are optional; when present each semantic axis may
// appear at most once.
struct Shape {
    std::vector<int64_t> dims;
    std::vector<Axis> tags;  // empty, or one tag per dim

    Shape() = default;
    explicit Shape(std::vector<int64_t> d, std::vector<Axis> t = {})
        : dims(std::move(d)), tags(std::move(t)) {
        if (dims.empty()) throw std::invalid_argument("Shape: dims must be non-empty");
        for (int64_t v : dims)
            if (v < 1) throw std::invalid_argument("Shape: dimension sizes must be >= 1, got " + dims_str(dims));
        if (!tags.empty()) {
            if (tags.size() != dims.size())
                throw std::invalid_argument("Shape: tag count must match dim count");
            for (size_t i = 0; i < tags.size(); ++i)
                for (size_t j = i + 1; j < tags.size(); ++j)
                    if (tags[i] != Axis::Any && tags[i] == tags[j])
                        throw std::invalid_argument("Shape: duplicate axis tag");
        }
    }

    static Shape nchw(int64_t n, int64_t c, int64_t h, int64_t w) {
        return Shape({n, c, h, w}, {Axis::Batch, Axis::Channel, Axis::Height, Axis::Width});
    }

    int64_t numel() const {
        return std::accumulate(dims.begin(), dims.end(), int64_t{1}, std::multiplies<>());
    }
    std::string str() const { return dims_str(dims); }
};

// Dense row-major tensor. Immutable by convention once an op returns it;
// mutation is reserved for construction, parameter updates and batch-norm
// running statistics.
template <typename T>
class TensorT {
  public:
    TensorT() = default;

    explicit TensorT(std::vector<int64_t> dims) : dims_(std::move(dims)) {
        validate_dims();
        data_.assign(static_cast<size_t>(numel_), T(0));
    }

    TensorT(std::vector<int64_t> dims, std::vector<T> data)
        : dims_(std::move(dims)), data_(std::move(data)) {
        validate_dims();
        if (static_cast<int64_t>(data_.size()) != numel_)
            throw std::invalid_argument("Tensor: data length " + std::to_string(data_.size()) +
                                        " does not match shape " + dims_str(dims_));
    }

    static TensorT full(std::vector<int64_t> dims, T v) {
        TensorT t(std::move(dims));
        std::fill(t.data_.begin(), t.data_.end(), v);
        return t;
    }
    static TensorT scalar(T v) { return TensorT({1}, {v}); }

    const std::vector<int64_t>& dims() const { return dims_; }
    int64_t dim(int i) const { return dims_.at(static_cast<size_t>(i)); }
    int rank() const { return static_cast<int>(dims_.size()); }
    int64_t numel() const { return numel_; }
    bool empty() const { return dims_.empty(); }
    std::string shape_str() const { return dims_str(dims_); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::vector<T>& vec() { return data_; }
    const std::vector<T>& vec() const { return data_; }

    T& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    const T& operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    // 4-D NCHW accessors (the common case throughout the op set).
    T& at4(int64_t n, int64_t c, int64_t h, int64_t w) {
        return data_[static_cast<size_t>(((n * dims_[1] + c) * dims_[2] + h) * dims_[3] + w)];
    }
    const T& at4(int64_t n, int64_t c, int64_t h, int64_t w) const {
        return data_[static_cast<size_t>(((n * dims_[1] + c) * dims_[2] + h) * dims_[3] + w)];
    }

    bool same_shape(const TensorT& o) const { return dims_ == o.dims_; }

    TensorT reshaped(std::vector<int64_t> new_dims) const {
        TensorT t;
        t.dims_ = std::move(new_dims);
        t.validate_dims();
        if (t.numel_ != numel_)
            throw std::invalid_argument("reshape: element count mismatch, " + dims_str(dims_) +
                                        " -> " + dims_str(t.dims_));
        t.data_ = data_;
        return t;
    }

  private:
    void validate_dims() {
        if (dims_.empty()) throw std::invalid_argument("Tensor: shape must be non-empty");
        for (int64_t v : dims_)
            if (v < 1)
                throw std::invalid_argument("Tensor: dimension sizes must be >= 1, got " + dims_str(dims_));
        numel_ = std::accumulate(dims_.begin(), dims_.end(), int64_t{1}, std::multiplies<>());
    }

    std::vector<int64_t> dims_;
    std::vector<T> data_;
    int64_t numel_ = 0;
};

using Tensor = TensorT<double>;   // test/training dtype
using TensorF = TensorT<float>;   // inference dtype

template <typename To, typename From>
TensorT<To> cast(const TensorT<From>& x) {
    std::vector<To> d(static_cast<size_t>(x.numel()));
    for (int64_t i = 0; i < x.numel(); ++i) d[static_cast<size_t>(i)] = static_cast<To>(x[i]);
    return TensorT<To>(x.dims(), std::move(d));
}

// Global toggle for post-op finiteness checks (cheap scan of every op
// output). Enabled by default; benchmarking disables it.
inline bool& runtime_checks() {
    static bool enabled = true;
    return enabled;
}

template <typename T>
inline void check_finite(const TensorT<T>& t, const char* op) {
    if (!runtime_checks()) return;
    for (int64_t i = 0; i < t.numel(); ++i) {
        if (!std::isfinite(static_cast<double>(t[i])))
            throw std::runtime_error(std::string(op) + ": non-finite value at flat index " +
                                     std::to_string(i));
    }
}

}  // namespace hgpe
