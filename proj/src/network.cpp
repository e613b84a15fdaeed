#include "latent_unlearn/network.hpp"

#include <Eigen/Core>
#include <cmath>
#include <stdexcept>

namespace latent_unlearn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

void fill_normal(std::vector<double>& v, Rng& rng, double stddev) {
    for (auto& x : v) x = stddev * rng.normal();
    quantize_f32(v);
}

class Linear final : public Layer {
public:
    Linear(int in, int out, double gain) : in_(in), out_(out), gain_(gain) {
        weight_.shape = {out, in};
        weight_.value.assign(static_cast<std::size_t>(in) * out, 0.0);
        bias_.shape = {out};
        bias_.value.assign(out, 0.0);
    }

    std::string kind() const override { return "linear"; }

    Shape output_shape(const Shape& in) const override {
        if (static_cast<int>(in.sample_size()) != in_) {
            throw std::invalid_argument("linear layer expects " + std::to_string(in_) +
                                        " inputs, got " + in.str());
        }
        return {in.n, out_, 1, 1};
    }

    Tensor forward(const Tensor& x) const override {
        Tensor y(output_shape(x.shape()));
        ConstMatMap X(x.data(), x.n(), in_);
        ConstMatMap W(weight_.value.data(), out_, in_);
        MatMap Y(y.data(), x.n(), out_);
        Y.noalias() = X * W.transpose();
        Y.rowwise() += ConstVecMap(bias_.value.data(), out_).transpose();
        return y;
    }

    Tensor backward(const Tensor& x, const Tensor&, const Tensor& dy,
                    std::span<std::vector<double>> grads) const override {
        ConstMatMap X(x.data(), x.n(), in_);
        ConstMatMap W(weight_.value.data(), out_, in_);
        ConstMatMap DY(dy.data(), x.n(), out_);
        if (!grads.empty()) {
            MatMap(grads[0].data(), out_, in_).noalias() += DY.transpose() * X;
            VecMap(grads[1].data(), out_) += DY.colwise().sum().transpose();
        }
        Tensor dx(x.shape());
        MatMap(dx.data(), x.n(), in_).noalias() = DY * W;
        return dx;
    }

    std::vector<Parameter*> parameters() override { return {&weight_, &bias_}; }

    void initialize(Rng& rng) override {
        fill_normal(weight_.value, rng, gain_ * std::sqrt(2.0 / in_));
        std::fill(bias_.value.begin(), bias_.value.end(), 0.0);
    }

    std::unique_ptr<Layer> clone() const override { return std::make_unique<Linear>(*this); }

private:
    int in_, out_;
    double gain_;
    Parameter weight_, bias_;
};

// 3x3 convolution, stride 1, zero padding 1, via im2col.
class Conv3x3 final : public Layer {
public:
    Conv3x3(int in, int out, double gain) : in_(in), out_(out), gain_(gain) {
        weight_.shape = {out, in, 3, 3};
        weight_.value.assign(static_cast<std::size_t>(out) * in * 9, 0.0);
        bias_.shape = {out};
        bias_.value.assign(out, 0.0);
    }

    std::string kind() const override { return "conv3x3"; }

    Shape output_shape(const Shape& in) const override {
        if (in.c != in_) {
            throw std::invalid_argument("conv layer expects " + std::to_string(in_) +
                                        " channels, got " + in.str());
        }
        return {in.n, out_, in.h, in.w};
    }

    Tensor forward(const Tensor& x) const override {
        Tensor y(output_shape(x.shape()));
        const int hw = x.h() * x.w();
        RowMat cols(in_ * 9, hw);
        ConstMatMap W(weight_.value.data(), out_, in_ * 9);
        ConstVecMap b(bias_.value.data(), out_);
        for (int s = 0; s < x.n(); ++s) {
            im2col(x.sample(s).data(), x.h(), x.w(), cols);
            MatMap Y(y.sample(s).data(), out_, hw);
            Y.noalias() = W * cols;
            Y.colwise() += b;
        }
        return y;
    }

    Tensor backward(const Tensor& x, const Tensor&, const Tensor& dy,
                    std::span<std::vector<double>> grads) const override {
        const int hw = x.h() * x.w();
        RowMat cols(in_ * 9, hw);
        RowMat dcols(in_ * 9, hw);
        ConstMatMap W(weight_.value.data(), out_, in_ * 9);
        Tensor dx(x.shape());
        for (int s = 0; s < x.n(); ++s) {
            ConstMatMap DY(dy.sample(s).data(), out_, hw);
            if (!grads.empty()) {
                im2col(x.sample(s).data(), x.h(), x.w(), cols);
                MatMap(grads[0].data(), out_, in_ * 9).noalias() += DY * cols.transpose();
                VecMap(grads[1].data(), out_) += DY.rowwise().sum();
            }
            dcols.noalias() = W.transpose() * DY;
            col2im(dcols, x.h(), x.w(), dx.sample(s).data());
        }
        return dx;
    }

    std::vector<Parameter*> parameters() override { return {&weight_, &bias_}; }

    void initialize(Rng& rng) override {
        fill_normal(weight_.value, rng, gain_ * std::sqrt(2.0 / (in_ * 9)));
        std::fill(bias_.value.begin(), bias_.value.end(), 0.0);
    }

    std::unique_ptr<Layer> clone() const override { return std::make_unique<Conv3x3>(*this); }

private:
    void im2col(const double* src, int h, int w, RowMat& cols) const {
        for (int ci = 0; ci < in_; ++ci) {
            const double* plane = src + static_cast<std::size_t>(ci) * h * w;
            for (int ky = 0; ky < 3; ++ky) {
                for (int kx = 0; kx < 3; ++kx) {
                    double* row = cols.row(ci * 9 + ky * 3 + kx).data();
                    for (int y = 0; y < h; ++y) {
                        const int sy = y + ky - 1;
                        double* dst = row + y * w;
                        if (sy < 0 || sy >= h) {
                            std::fill(dst, dst + w, 0.0);
                            continue;
                        }
                        const double* srow = plane + sy * w;
                        for (int xx = 0; xx < w; ++xx) {
                            const int sx = xx + kx - 1;
                            dst[xx] = (sx < 0 || sx >= w) ? 0.0 : srow[sx];
                        }
                    }
                }
            }
        }
    }

    void col2im(const RowMat& cols, int h, int w, double* dst) const {
        for (int ci = 0; ci < in_; ++ci) {
            double* plane = dst + static_cast<std::size_t>(ci) * h * w;
            for (int ky = 0; ky < 3; ++ky) {
                for (int kx = 0; kx < 3; ++kx) {
                    const double* row = cols.row(ci * 9 + ky * 3 + kx).data();
                    for (int y = 0; y < h; ++y) {
                        const int sy = y + ky - 1;
                        if (sy < 0 || sy >= h) continue;
                        double* drow = plane + sy * w;
                        const double* src = row + y * w;
                        for (int xx = 0; xx < w; ++xx) {
                            const int sx = xx + kx - 1;
                            if (sx >= 0 && sx < w) drow[sx] += src[xx];
                        }
                    }
                }
            }
        }
    }

    int in_, out_;
    double gain_;
    Parameter weight_, bias_;
};

class LeakyRelu final : public Layer {
public:
    explicit LeakyRelu(double slope) : slope_(slope) {}
    std::string kind() const override { return "leaky_relu"; }
    Shape output_shape(const Shape& in) const override { return in; }

    Tensor forward(const Tensor& x) const override {
        Tensor y(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0.0 ? x[i] : slope_ * x[i];
        return y;
    }

    Tensor backward(const Tensor& x, const Tensor&, const Tensor& dy,
                    std::span<std::vector<double>>) const override {
        Tensor dx(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) dx[i] = x[i] > 0.0 ? dy[i] : slope_ * dy[i];
        return dx;
    }

    std::unique_ptr<Layer> clone() const override { return std::make_unique<LeakyRelu>(*this); }

private:
    double slope_;
};

class Tanh final : public Layer {
public:
    std::string kind() const override { return "tanh"; }
    Shape output_shape(const Shape& in) const override { return in; }

    Tensor forward(const Tensor& x) const override {
        Tensor y(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) y[i] = std::tanh(x[i]);
        return y;
    }

    Tensor backward(const Tensor& x, const Tensor& y, const Tensor& dy,
                    std::span<std::vector<double>>) const override {
        Tensor dx(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) dx[i] = dy[i] * (1.0 - y[i] * y[i]);
        return dx;
    }

    std::unique_ptr<Layer> clone() const override { return std::make_unique<Tanh>(*this); }
};

class Upsample2x final : public Layer {
public:
    std::string kind() const override { return "upsample2x"; }
    Shape output_shape(const Shape& in) const override { return {in.n, in.c, in.h * 2, in.w * 2}; }

    Tensor forward(const Tensor& x) const override {
        Tensor y(output_shape(x.shape()));
        for (int n = 0; n < x.n(); ++n)
            for (int c = 0; c < x.c(); ++c)
                for (int yy = 0; yy < y.h(); ++yy)
                    for (int xx = 0; xx < y.w(); ++xx) y.at(n, c, yy, xx) = x.at(n, c, yy / 2, xx / 2);
        return y;
    }

    Tensor backward(const Tensor& x, const Tensor& y, const Tensor& dy,
                    std::span<std::vector<double>>) const override {
        Tensor dx(x.shape());
        for (int n = 0; n < x.n(); ++n)
            for (int c = 0; c < x.c(); ++c)
                for (int yy = 0; yy < y.h(); ++yy)
                    for (int xx = 0; xx < y.w(); ++xx) dx.at(n, c, yy / 2, xx / 2) += dy.at(n, c, yy, xx);
        return dx;
    }

    std::unique_ptr<Layer> clone() const override { return std::make_unique<Upsample2x>(*this); }
};

class AvgPool2x final : public Layer {
public:
    std::string kind() const override { return "avg_pool2x"; }
    Shape output_shape(const Shape& in) const override {
        if (in.h % 2 != 0 || in.w % 2 != 0) throw std::invalid_argument("avg pool needs even size " + in.str());
        return {in.n, in.c, in.h / 2, in.w / 2};
    }

    Tensor forward(const Tensor& x) const override {
        Tensor y(output_shape(x.shape()));
        for (int n = 0; n < x.n(); ++n)
            for (int c = 0; c < x.c(); ++c)
                for (int yy = 0; yy < y.h(); ++yy)
                    for (int xx = 0; xx < y.w(); ++xx)
                        y.at(n, c, yy, xx) = 0.25 * (x.at(n, c, 2 * yy, 2 * xx) + x.at(n, c, 2 * yy, 2 * xx + 1) +
                                                     x.at(n, c, 2 * yy + 1, 2 * xx) +
                                                     x.at(n, c, 2 * yy + 1, 2 * xx + 1));
        return y;
    }

    Tensor backward(const Tensor& x, const Tensor& y, const Tensor& dy,
                    std::span<std::vector<double>>) const override {
        Tensor dx(x.shape());
        for (int n = 0; n < x.n(); ++n)
            for (int c = 0; c < x.c(); ++c)
                for (int yy = 0; yy < y.h(); ++yy)
                    for (int xx = 0; xx < y.w(); ++xx) {
                        const double g = 0.25 * dy.at(n, c, yy, xx);
                        dx.at(n, c, 2 * yy, 2 * xx) = g;
                        dx.at(n, c, 2 * yy, 2 * xx + 1) = g;
                        dx.at(n, c, 2 * yy + 1, 2 * xx) = g;
                        dx.at(n, c, 2 * yy + 1, 2 * xx + 1) = g;
                    }
        return dx;
    }

    std::unique_ptr<Layer> clone() const override { return std::make_unique<AvgPool2x>(*this); }
};

class Reshape final : public Layer {
public:
    Reshape(int c, int h, int w) : c_(c), h_(h), w_(w) {}
    std::string kind() const override { return "reshape"; }
    Shape output_shape(const Shape& in) const override {
        Shape out{in.n, c_, h_, w_};
        if (out.size() != in.size()) throw std::invalid_argument("reshape size mismatch from " + in.str());
        return out;
    }
    Tensor forward(const Tensor& x) const override { return x.reshaped(c_, h_, w_); }
    Tensor backward(const Tensor& x, const Tensor&, const Tensor& dy,
                    std::span<std::vector<double>>) const override {
        return dy.reshaped(x.c(), x.h(), x.w());
    }
    std::unique_ptr<Layer> clone() const override { return std::make_unique<Reshape>(*this); }

private:
    int c_, h_, w_;
};

class Scale final : public Layer {
public:
    explicit Scale(double factor) : factor_(factor) {}
    std::string kind() const override { return "scale"; }
    Shape output_shape(const Shape& in) const override { return in; }
    Tensor forward(const Tensor& x) const override {
        Tensor y(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) y[i] = factor_ * x[i];
        return y;
    }
    Tensor backward(const Tensor& x, const Tensor&, const Tensor& dy,
                    std::span<std::vector<double>>) const override {
        Tensor dx(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) dx[i] = factor_ * dy[i];
        return dx;
    }
    std::unique_ptr<Layer> clone() const override { return std::make_unique<Scale>(*this); }

private:
    double factor_;
};

class L2Normalize final : public Layer {
public:
    std::string kind() const override { return "l2_normalize"; }
    Shape output_shape(const Shape& in) const override { return in; }

    Tensor forward(const Tensor& x) const override {
        Tensor y(x.shape());
        for (int s = 0; s < x.n(); ++s) {
            auto in = x.sample(s);
            auto out = y.sample(s);
            const double norm = norm_of(in);
            for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] / norm;
        }
        return y;
    }

    Tensor backward(const Tensor& x, const Tensor& y, const Tensor& dy,
                    std::span<std::vector<double>>) const override {
        Tensor dx(x.shape());
        for (int s = 0; s < x.n(); ++s) {
            auto ys = y.sample(s);
            auto gs = dy.sample(s);
            auto out = dx.sample(s);
            const double norm = norm_of(x.sample(s));
            double proj = 0.0;
            for (std::size_t i = 0; i < ys.size(); ++i) proj += ys[i] * gs[i];
            for (std::size_t i = 0; i < ys.size(); ++i) out[i] = (gs[i] - ys[i] * proj) / norm;
        }
        return dx;
    }

    std::unique_ptr<Layer> clone() const override { return std::make_unique<L2Normalize>(*this); }

private:
    static double norm_of(std::span<const double> v) {
        double sq = 0.0;
        for (double e : v) sq += e * e;
        return std::max(std::sqrt(sq), 1e-12);
    }
};

}  // namespace

void quantize_f32(std::vector<double>& v) {
    for (auto& x : v) x = static_cast<double>(static_cast<float>(x));
}

std::unique_ptr<Layer> make_linear(int in, int out, double gain) { return std::make_unique<Linear>(in, out, gain); }
std::unique_ptr<Layer> make_conv3x3(int in, int out, double gain) { return std::make_unique<Conv3x3>(in, out, gain); }
std::unique_ptr<Layer> make_leaky_relu(double slope) { return std::make_unique<LeakyRelu>(slope); }
std::unique_ptr<Layer> make_tanh() { return std::make_unique<Tanh>(); }
std::unique_ptr<Layer> make_upsample2x() { return std::make_unique<Upsample2x>(); }
std::unique_ptr<Layer> make_avg_pool2x() { return std::make_unique<AvgPool2x>(); }
std::unique_ptr<Layer> make_reshape(int c, int h, int w) { return std::make_unique<Reshape>(c, h, w); }
std::unique_ptr<Layer> make_scale(double factor) { return std::make_unique<Scale>(factor); }
std::unique_ptr<Layer> make_l2_normalize() { return std::make_unique<L2Normalize>(); }

// ---------------------------------------------------------------------------
// Network

Network::Network(const Network& other) : name_(other.name_) {
    layers_.reserve(other.layers_.size());
    for (const auto& l : other.layers_) layers_.push_back(l->clone());
}

Network& Network::operator=(const Network& other) {
    if (this != &other) {
        Network copy(other);
        *this = std::move(copy);
    }
    return *this;
}

Network& Network::add(std::unique_ptr<Layer> layer) {
    layers_.push_back(std::move(layer));
    rename_parameters();
    return *this;
}

void Network::rename_parameters() {
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        auto params = layers_[i]->parameters();
        static const char* suffix[] = {"weight", "bias"};
        for (std::size_t k = 0; k < params.size(); ++k) {
            params[k]->name = name_ + "." + std::to_string(i) + "." + suffix[k % 2];
        }
    }
}

Shape Network::output_shape(Shape in) const {
    for (const auto& l : layers_) in = l->output_shape(in);
    return in;
}

Tensor Network::forward(const Tensor& x) const {
    Tensor cur = x;
    for (const auto& l : layers_) cur = l->forward(cur);
    return cur;
}

Tensor Network::forward(const Tensor& x, Trace& trace) const {
    trace.activations.clear();
    trace.activations.reserve(layers_.size() + 1);
    trace.activations.push_back(x);
    for (const auto& l : layers_) trace.activations.push_back(l->forward(trace.activations.back()));
    return trace.activations.back();
}

Tensor Network::backward(const Trace& trace, const Tensor& grad_out, Gradients* grads) const {
    return backward(trace, {GradSeed{layers_.size(), grad_out}}, grads);
}

Tensor Network::backward(const Trace& trace, std::vector<GradSeed> seeds, Gradients* grads) const {
    if (trace.activations.size() != layers_.size() + 1) {
        throw std::logic_error(name_ + ": trace does not match network depth");
    }
    std::size_t top = 0;
    for (const auto& s : seeds) top = std::max(top, s.activation);
    if (seeds.empty()) return Tensor(trace.activations[0].shape());

    auto seed_at = [&](std::size_t idx, Tensor& acc, bool& have) {
        for (auto& s : seeds) {
            if (s.activation != idx) continue;
            if (s.grad.shape() != trace.activations[idx].shape()) {
                throw std::invalid_argument(name_ + ": gradient seed shape " + s.grad.shape().str() +
                                            " != activation " + trace.activations[idx].shape().str());
            }
            if (!have) {
                acc = std::move(s.grad);
                have = true;
            } else {
                for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += s.grad[i];
            }
        }
    };

    Tensor grad;
    bool have = false;
    seed_at(top, grad, have);

    std::size_t param_offset = 0;
    std::vector<std::size_t> offsets(layers_.size());
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        offsets[i] = param_offset;
        param_offset += layers_[i]->parameters().size();
    }

    for (std::size_t i = top; i-- > 0;) {
        auto& layer = *layers_[i];
        const std::size_t np = layer.parameters().size();
        std::span<std::vector<double>> g;
        if (grads != nullptr && np > 0) g = std::span<std::vector<double>>(grads->data() + offsets[i], np);
        grad = layer.backward(trace.activations[i], trace.activations[i + 1], grad, g);
        seed_at(i, grad, have);
    }
    return grad;
}

std::vector<Parameter*> Network::parameters() {
    std::vector<Parameter*> out;
    for (auto& l : layers_)
        for (auto* p : l->parameters()) out.push_back(p);
    return out;
}

std::vector<const Parameter*> Network::parameters() const {
    std::vector<const Parameter*> out;
    for (auto& l : layers_)
        for (auto* p : l->parameters()) out.push_back(p);
    return out;
}

std::size_t Network::parameter_count() const {
    std::size_t n = 0;
    for (const auto* p : parameters()) n += p->size();
    return n;
}

Gradients Network::zero_gradients() const {
    Gradients g;
    for (const auto* p : parameters()) g.emplace_back(p->size(), 0.0);
    return g;
}

void Network::initialize(Rng& rng) {
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        Rng sub = rng.substream(name_ + ".layer", i);
        layers_[i]->initialize(sub);
    }
    rename_parameters();
}

// ---------------------------------------------------------------------------
// Adam

void Adam::step(std::span<Parameter* const> params, const Gradients& grads) {
    if (grads.size() != params.size()) throw std::invalid_argument("adam: gradient count mismatch");
    if (m_.empty()) {
        for (const auto* p : params) {
            m_.emplace_back(p->size(), 0.0);
            v_.emplace_back(p->size(), 0.0);
        }
    }
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto& value = params[k]->value;
        const auto& g = grads[k];
        auto& m = m_[k];
        auto& v = v_[k];
        for (std::size_t i = 0; i < value.size(); ++i) {
            m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
            v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
            const double mhat = m[i] / c1;
            const double vhat = v[i] / c2;
            value[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
        }
        quantize_f32(value);
    }
}

}  // namespace latent_unlearn
