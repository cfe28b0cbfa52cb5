#pragma once

#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace cpdiff {

// Dense row-major array. Shape product must always equal data size.
template <typename T>
struct ArrayT {
    std::vector<int64_t> shape;
    std::vector<T> data;

    ArrayT() = default;
    explicit ArrayT(std::vector<int64_t> s) : shape(std::move(s)) {
        data.assign(static_cast<size_t>(numel_of(shape)), T(0));
    }
    ArrayT(std::vector<int64_t> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        if (static_cast<int64_t>(data.size()) != numel_of(shape)) {
            throw std::invalid_argument("array: shape/data mismatch");
        }
    }

    static int64_t numel_of(const std::vector<int64_t>& s) {
        int64_t n = 1;
        for (int64_t d : s) {
            if (d <= 0) throw std::invalid_argument("array: non-positive dim");
            n *= d;
        }
        return n;
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int64_t dim(int i) const { return shape[static_cast<size_t>(i)]; }

    T* ptr() { return data.data(); }
    const T* ptr() const { return data.data(); }

    static ArrayT zeros(std::vector<int64_t> s) { return ArrayT(std::move(s)); }
    static ArrayT full(std::vector<int64_t> s, T v) {
        ArrayT a(std::move(s));
        std::fill(a.data.begin(), a.data.end(), v);
        return a;
    }
    static ArrayT scalar(T v) { return ArrayT({1}, {v}); }

    bool same_shape(const ArrayT& o) const { return shape == o.shape; }

    template <typename U>
    ArrayT<U> cast() const {
        ArrayT<U> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }
};

using Array = ArrayT<float>;
using ArrayD = ArrayT<double>;

inline std::string shape_str(const std::vector<int64_t>& s) {
    std::string out = "(";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    out += ")";
    return out;
}

}  // namespace cpdiff
