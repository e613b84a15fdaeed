#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace latent_unlearn {

/// Dense NCHW batch. Flat vectors use h = w = 1.
struct Shape {
    int n = 0, c = 0, h = 1, w = 1;

    std::size_t sample_size() const { return static_cast<std::size_t>(c) * h * w; }
    std::size_t size() const { return static_cast<std::size_t>(n) * sample_size(); }
    bool operator==(const Shape&) const = default;
    std::string str() const {
        return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
               std::to_string(w) + ")";
    }
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape s, double fill = 0.0) : shape_(s), data_(s.size(), fill) {}
    Tensor(Shape s, std::vector<double> data) : shape_(s), data_(std::move(data)) {
        if (data_.size() != shape_.size()) {
            throw std::invalid_argument("tensor data size " + std::to_string(data_.size()) +
                                        " does not match shape " + shape_.str());
        }
    }

    /// Single flat vector as a batch of one.
    static Tensor vector(std::vector<double> v) {
        Shape s{1, static_cast<int>(v.size()), 1, 1};
        return Tensor(s, std::move(v));
    }

    const Shape& shape() const { return shape_; }
    int n() const { return shape_.n; }
    int c() const { return shape_.c; }
    int h() const { return shape_.h; }
    int w() const { return shape_.w; }
    std::size_t size() const { return data_.size(); }
    std::size_t sample_size() const { return shape_.sample_size(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& values() { return data_; }
    const std::vector<double>& values() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double& at(int n, int c, int y, int x) {
        return data_[((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + y) * shape_.w + x];
    }
    double at(int n, int c, int y, int x) const {
        return data_[((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + y) * shape_.w + x];
    }

    std::span<double> sample(int i) { return {data_.data() + i * sample_size(), sample_size()}; }
    std::span<const double> sample(int i) const {
        return {data_.data() + i * sample_size(), sample_size()};
    }

    /// Same data, new per-sample layout (sample sizes must agree).
    Tensor reshaped(int c, int h, int w) const {
        Shape s{shape_.n, c, h, w};
        if (s.size() != size()) throw std::invalid_argument("reshape size mismatch " + s.str());
        return Tensor(s, data_);
    }

    /// Copy of samples [begin, begin + count).
    Tensor slice(int begin, int count) const {
        Shape s = shape_;
        s.n = count;
        auto first = data_.begin() + static_cast<std::ptrdiff_t>(begin * sample_size());
        return Tensor(s, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(s.size())));
    }

private:
    Shape shape_;
    std::vector<double> data_;
};

/// Stack equally shaped tensors along the batch axis.
inline Tensor concat(std::span<const Tensor> parts) {
    if (parts.empty()) return {};
    Shape s = parts[0].shape();
    s.n = 0;
    for (const auto& p : parts) {
        if (p.c() != s.c || p.h() != s.h || p.w() != s.w) {
            throw std::invalid_argument("concat shape mismatch " + p.shape().str());
        }
        s.n += p.n();
    }
    std::vector<double> out;
    out.reserve(s.size());
    for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
    return Tensor(s, std::move(out));
}

}  // namespace latent_unlearn
