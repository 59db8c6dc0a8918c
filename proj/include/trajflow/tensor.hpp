#pragma once

#include <trajflow/errors.hpp>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace trajflow {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "x" : "") << shape[i];
    }
    os << ']';
    return os.str();
}

/// Dense row-major f64 tensor. Value type; copies are deep.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0)
        : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

    Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (shape_numel(shape_) != data_.size()) {
            throw DimensionError("tensor: shape " + shape_str(shape_) + " does not match " +
                                 std::to_string(data_.size()) + " values");
        }
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }

    static Tensor scalar(double v) { return Tensor(Shape{1, 1}, std::vector<double>{v}); }

    static Tensor row(std::span<const double> values) {
        return Tensor(Shape{1, values.size()}, std::vector<double>(values.begin(), values.end()));
    }

    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> data) {
        return Tensor(Shape{rows, cols}, std::move(data));
    }

    static Tensor identity(std::size_t n) {
        Tensor t(Shape{n, n});
        for (std::size_t i = 0; i < n; ++i) {
            t.data_[i * n + i] = 1.0;
        }
        return t;
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::size_t dim(std::size_t i) const {
        if (i >= shape_.size()) {
            throw DimensionError("tensor: axis " + std::to_string(i) + " out of range for shape " +
                                 shape_str(shape_));
        }
        return shape_[i];
    }

    /// Rows/cols of a rank-2 tensor.
    std::size_t rows() const { return require_rank2().first; }
    std::size_t cols() const { return require_rank2().second; }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    std::vector<double>& vec() noexcept { return data_; }
    const std::vector<double>& vec() const noexcept { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

    double item() const {
        if (data_.size() != 1) {
            throw DimensionError("tensor: item() on shape " + shape_str(shape_));
        }
        return data_[0];
    }

    Tensor reshaped(Shape shape) const {
        if (shape_numel(shape) != data_.size()) {
            throw DimensionError("tensor: cannot reshape " + shape_str(shape_) + " to " +
                                 shape_str(shape));
        }
        return Tensor(std::move(shape), data_);
    }

    /// Copy of row `r` as a 1×cols tensor.
    Tensor row_at(std::size_t r) const {
        const std::size_t n = cols();
        if (r >= rows()) {
            throw DimensionError("tensor: row index out of range");
        }
        return Tensor(Shape{1, n}, std::vector<double>(data_.begin() + r * n, data_.begin() + (r + 1) * n));
    }

    bool all_finite() const noexcept {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

    bool operator==(const Tensor& o) const = default;

    Tensor& operator+=(const Tensor& o) {
        require_same_shape(o, "+=");
        for (std::size_t i = 0; i < data_.size(); ++i) {
            data_[i] += o.data_[i];
        }
        return *this;
    }

    Tensor& operator-=(const Tensor& o) {
        require_same_shape(o, "-=");
        for (std::size_t i = 0; i < data_.size(); ++i) {
            data_[i] -= o.data_[i];
        }
        return *this;
    }

    Tensor& operator*=(double s) {
        for (double& v : data_) {
            v *= s;
        }
        return *this;
    }

    friend Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
    friend Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
    friend Tensor operator*(Tensor a, double s) { return a *= s; }
    friend Tensor operator*(double s, Tensor a) { return a *= s; }

    /// this += s * o
    Tensor& axpy(double s, const Tensor& o) {
        require_same_shape(o, "axpy");
        for (std::size_t i = 0; i < data_.size(); ++i) {
            data_[i] += s * o.data_[i];
        }
        return *this;
    }

    void require_same_shape(const Tensor& o, const char* op) const {
        if (shape_ != o.shape_) {
            throw DimensionError(std::string("tensor ") + op + ": shape mismatch " + shape_str(shape_) +
                                 " vs " + shape_str(o.shape_));
        }
    }

private:
    std::pair<std::size_t, std::size_t> require_rank2() const {
        if (shape_.size() != 2) {
            throw DimensionError("tensor: expected rank-2, got " + shape_str(shape_));
        }
        return {shape_[0], shape_[1]};
    }

    Shape shape_;
    std::vector<double> data_;
};

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    a.require_same_shape(b, "max_abs_diff");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        m = std::max(m, std::abs(a[i] - b[i]));
    }
    return m;
}

inline double l2_norm(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) {
        s += v * v;
    }
    return std::sqrt(s);
}

/// Plain (non-differentiable) row-major product, i-k-j loop order.
inline Tensor matmul_raw(const Tensor& a, const Tensor& b) {
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != k) {
        throw DimensionError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    }
    Tensor out(Shape{m, n});
    const double* ap = a.data().data();
    const double* bp = b.data().data();
    double* op = out.data().data();
    for (std::size_t i = 0; i < m; ++i) {
        double* orow = op + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ap[i * k + p];
            if (av == 0.0) {
                continue;
            }
            const double* brow = bp + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                orow[j] += av * brow[j];
            }
        }
    }
    return out;
}

inline Tensor transpose_raw(const Tensor& a) {
    const std::size_t m = a.rows(), n = a.cols();
    Tensor out(Shape{n, m});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            out.at(j, i) = a.at(i, j);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// DGFT v1 tensor files
//
//   "DGFT" | u32 version (=1) | u32 rank | rank x u64 dims | f64 payload
//
// All integers and floats little-endian; payload row-major.
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void put_le(std::string& out, T value) {
    auto bits = std::bit_cast<std::array<unsigned char, sizeof(T)>>(value);
    if constexpr (std::endian::native == std::endian::big) {
        std::reverse(bits.begin(), bits.end());
    }
    out.append(reinterpret_cast<const char*>(bits.data()), bits.size());
}

template <typename T>
T get_le(std::string_view in, std::size_t& pos, const std::string& where) {
    if (pos + sizeof(T) > in.size()) {
        throw IoError(where + ": truncated DGFT file");
    }
    std::array<unsigned char, sizeof(T)> bits{};
    std::memcpy(bits.data(), in.data() + pos, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) {
        std::reverse(bits.begin(), bits.end());
    }
    pos += sizeof(T);
    return std::bit_cast<T>(bits);
}

}  // namespace detail

inline constexpr std::uint32_t kDgftVersion = 1;

inline std::string encode_dgft(const Tensor& t) {
    std::string out = "DGFT";
    out.reserve(12 + 8 * t.rank() + 8 * t.size());
    detail::put_le<std::uint32_t>(out, kDgftVersion);
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) {
        detail::put_le<std::uint64_t>(out, d);
    }
    for (double v : t.data()) {
        detail::put_le<double>(out, v);
    }
    return out;
}

inline Tensor decode_dgft(std::string_view bytes, const std::string& where = "dgft") {
    if (bytes.size() < 4 || bytes.substr(0, 4) != "DGFT") {
        throw IoError(where + ": bad magic, not a DGFT file");
    }
    std::size_t pos = 4;
    const auto version = detail::get_le<std::uint32_t>(bytes, pos, where);
    if (version != kDgftVersion) {
        throw IoError(where + ": unsupported DGFT version " + std::to_string(version));
    }
    const auto rank = detail::get_le<std::uint32_t>(bytes, pos, where);
    Shape shape(rank);
    for (auto& d : shape) {
        d = static_cast<std::size_t>(detail::get_le<std::uint64_t>(bytes, pos, where));
    }
    const std::size_t n = shape_numel(shape);
    if (bytes.size() - pos != n * sizeof(double)) {
        throw IoError(where + ": payload size does not match shape " + shape_str(shape));
    }
    std::vector<double> data(n);
    for (auto& v : data) {
        v = detail::get_le<double>(bytes, pos, where);
    }
    return Tensor(std::move(shape), std::move(data));
}

inline void save_dgft(const std::filesystem::path& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) {
        throw IoError(path.string() + ": cannot open for writing");
    }
    const std::string bytes = encode_dgft(t);
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) {
        throw IoError(path.string() + ": write failed");
    }
}

inline Tensor load_dgft(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw IoError(path.string() + ": cannot open for reading");
    }
    std::ostringstream ss;
    ss << is.rdbuf();
    return decode_dgft(ss.str(), path.string());
}

}  // namespace trajflow
