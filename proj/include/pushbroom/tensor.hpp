// Dense row-major N-d tensor of doubles. The value type everywhere in the
// engine: images, lines, features, parameters, gradients.
#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace pushbroom {

using Shape = std::vector<int>;

[[noreturn]] inline void fail(const std::string& msg) {
    throw std::runtime_error(msg);
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << " x ";
        os << s[i];
    }
    os << "]";
    return os.str();
}

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int e : s) {
        if (e <= 0) fail("tensor: non-positive extent in shape " + shape_str(s));
        n *= e;
    }
    return n;
}

class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape) : shape_(std::move(shape)) {
        data_.assign(shape_numel(shape_), 0.0);
    }
    Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
        data_.assign(shape_numel(shape_), fill);
    }
    Tensor(Shape shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if ((int64_t)data_.size() != shape_numel(shape_))
            fail("tensor: data length " + std::to_string(data_.size()) +
                 " does not match shape " + shape_str(shape_));
    }

    static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

    int ndim() const { return (int)shape_.size(); }
    int dim(int i) const { return shape_[(size_t)i]; }
    const Shape& shape() const { return shape_; }
    int64_t numel() const { return (int64_t)data_.size(); }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    double& operator[](int64_t i) { return data_[(size_t)i]; }
    double operator[](int64_t i) const { return data_[(size_t)i]; }

    // 3-d convenience accessors (the common [lines x pixels x channels] case)
    double& at(int i, int j, int k) {
        return data_[((size_t)i * shape_[1] + j) * shape_[2] + k];
    }
    double at(int i, int j, int k) const {
        return data_[((size_t)i * shape_[1] + j) * shape_[2] + k];
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    Tensor reshaped(Shape s) const {
        if (shape_numel(s) != numel())
            fail("reshape: cannot view " + shape_str(shape_) + " as " + shape_str(s));
        return Tensor(std::move(s), data_);
    }

    void fill(double v) { data_.assign(data_.size(), v); }

    size_t byte_size() const { return data_.size() * sizeof(double); }

private:
    Shape shape_;
    std::vector<double> data_;
};

inline void check_3d(const char* op, const Tensor& x) {
    if (x.ndim() != 3) fail(std::string(op) + ": expected 3-d tensor, got " + shape_str(x.shape()));
}

inline void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b))
        fail(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
             shape_str(b.shape()));
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    check_same_shape("max_abs_diff", a, b);
    double m = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
    return m;
}

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) return false;
    for (int64_t i = 0; i < a.numel(); ++i)
        if (a[i] != b[i] || std::signbit(a[i]) != std::signbit(b[i])) return false;
    return true;
}

}  // namespace pushbroom
