#pragma once

// Dense row-major tensors. Storage is always double; the dtype tag controls
// on-disk width in the container format (see container.hpp).

#include <cstddef>
#include <cstdint>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace sfc {

struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

[[noreturn]] inline void fail(const std::string& msg) { throw Error(msg); }

inline void require(bool cond, const std::string& msg) {
    if (!cond) fail(msg);
}

enum class DType : uint8_t { f32, f64 };

inline const char* dtype_name(DType d) { return d == DType::f32 ? "float32" : "float64"; }

inline DType dtype_from_name(const std::string& s) {
    if (s == "float32") return DType::f32;
    if (s == "float64") return DType::f64;
    fail("unknown dtype: " + s);
}

class Tensor {
public:
    Tensor() : data_(std::make_shared<std::vector<double>>()) {}

    Tensor(std::vector<std::size_t> shape, DType dtype = DType::f64)
        : shape_(std::move(shape)), dtype_(dtype),
          data_(std::make_shared<std::vector<double>>(count(shape_), 0.0)) {}

    Tensor(std::vector<std::size_t> shape, std::vector<double> values, DType dtype = DType::f64)
        : shape_(std::move(shape)), dtype_(dtype),
          data_(std::make_shared<std::vector<double>>(std::move(values))) {
        require(data_->size() == count(shape_), "tensor shape/element-count mismatch");
    }

    static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }

    // Copies share storage; clone() when a mutation must not alias.
    Tensor clone() const {
        Tensor t(shape_, *data_, dtype_);
        return t;
    }

    static Tensor full(std::vector<std::size_t> shape, double v) {
        Tensor t(std::move(shape));
        for (double& x : t.mut()) x = v;
        return t;
    }

    static Tensor scalar(double v) { return Tensor({}, {v}); }

    const std::vector<std::size_t>& shape() const { return shape_; }
    DType dtype() const { return dtype_; }
    std::size_t numel() const { return data_->size(); }
    std::size_t rank() const { return shape_.size(); }

    std::size_t dim(std::size_t i) const {
        require(i < shape_.size(), "tensor dim index out of range");
        return shape_[i];
    }

    // Row/column view of a rank-2 tensor.
    std::size_t rows() const { return rank() == 2 ? shape_[0] : (rank() == 1 ? 1 : 0); }
    std::size_t cols() const { return rank() == 2 ? shape_[1] : (rank() == 1 ? shape_[0] : 0); }

    std::span<const double> data() const { return {data_->data(), data_->size()}; }

    // In-place access; callers must own the only reference (construction time).
    std::span<double> mut() { return {data_->data(), data_->size()}; }

    double operator[](std::size_t i) const { return (*data_)[i]; }
    double at2(std::size_t r, std::size_t c) const { return (*data_)[r * shape_[1] + c]; }

    double item() const {
        require(numel() == 1, "item() on non-scalar tensor");
        return (*data_)[0];
    }

    Tensor with_dtype(DType d) const {
        Tensor t = *this;
        t.dtype_ = d;
        return t;
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    std::string shape_str() const {
        std::ostringstream os;
        os << "[";
        for (std::size_t i = 0; i < shape_.size(); ++i) os << (i ? "," : "") << shape_[i];
        os << "]";
        return os.str();
    }

    bool all_finite() const {
        for (double v : *data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

private:
    static std::size_t count(const std::vector<std::size_t>& shape) {
        return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
    }

    std::vector<std::size_t> shape_;
    DType dtype_ = DType::f64;
    std::shared_ptr<std::vector<double>> data_;
};

// C = A(m,k) * B(k,n), sequential inner loop over the last axis so results are
// reproducible across runs.
inline void matmul_acc(std::span<const double> a, std::span<const double> b, std::span<double> c,
                       std::size_t m, std::size_t k, std::size_t n, bool accumulate = false) {
    if (!accumulate)
        for (double& x : c) x = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a.data() + i * k;
        double* ci = c.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ai[p];
            if (av == 0.0) continue;
            const double* bp = b.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// C = A(m,k) * B(n,k)^T
inline void matmul_nt_acc(std::span<const double> a, std::span<const double> b, std::span<double> c,
                          std::size_t m, std::size_t k, std::size_t n, bool accumulate = false) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a.data() + i * k;
        double* ci = c.data() + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double* bj = b.data() + j * k;
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
            ci[j] = accumulate ? ci[j] + s : s;
        }
    }
}

// C = A(k,m)^T * B(k,n)
inline void matmul_tn_acc(std::span<const double> a, std::span<const double> b, std::span<double> c,
                          std::size_t m, std::size_t k, std::size_t n, bool accumulate = false) {
    if (!accumulate)
        for (double& x : c) x = 0.0;
    for (std::size_t p = 0; p < k; ++p) {
        const double* ap = a.data() + p * m;
        const double* bp = b.data() + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const double av = ap[i];
            if (av == 0.0) continue;
            double* ci = c.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

}  // namespace sfc
