#pragma once

#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "aftl/errors.hpp"
#include "aftl/rng.hpp"
#include "aftl/tensor.hpp"

namespace aftl {

enum class LayerKind : std::uint8_t { dense, conv2d, relu, flatten };

inline const char* to_string(LayerKind k) {
    switch (k) {
        case LayerKind::dense: return "dense";
        case LayerKind::conv2d: return "conv2d";
        case LayerKind::relu: return "relu";
        case LayerKind::flatten: return "flatten";
    }
    return "?";
}

/// One layer of a sequential network.
///  dense:  in features -> out features
///  conv2d: in channels -> out channels, square kernel, stride, no padding
struct LayerSpec {
    LayerKind kind = LayerKind::relu;
    std::size_t in = 0;
    std::size_t out = 0;
    std::size_t kernel = 0;
    std::size_t stride = 0;

    static LayerSpec dense(std::size_t in, std::size_t out) { return {LayerKind::dense, in, out, 0, 0}; }
    static LayerSpec conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
                            std::size_t stride = 1) {
        return {LayerKind::conv2d, in_channels, out_channels, kernel, stride};
    }
    static LayerSpec relu() { return {LayerKind::relu}; }
    static LayerSpec flatten() { return {LayerKind::flatten}; }

    bool has_params() const { return kind == LayerKind::dense || kind == LayerKind::conv2d; }

    Shape weight_shape() const {
        if (kind == LayerKind::dense) return {in, out};
        if (kind == LayerKind::conv2d) return {out, in, kernel, kernel};
        return {};
    }
    Shape bias_shape() const { return has_params() ? Shape{out} : Shape{}; }
    std::size_t fan_in() const { return kind == LayerKind::conv2d ? in * kernel * kernel : in; }

    friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

using LayerSpecs = std::vector<LayerSpec>;

/// Checks that every spec is well formed and that consecutive layers chain.
/// Spatial compatibility needs an input shape; see output_shape().
inline void validate_specs(std::span<const LayerSpec> specs) {
    if (specs.empty()) throw ConfigError("empty layer list");
    // Feature width flowing into the next dense layer, when known.
    std::optional<std::size_t> width;
    std::optional<std::size_t> channels;
    bool spatial = false;
    for (std::size_t i = 0; i < specs.size(); ++i) {
        const auto& s = specs[i];
        const auto where = "layer " + std::to_string(i) + " (" + to_string(s.kind) + "): ";
        switch (s.kind) {
            case LayerKind::dense:
                if (s.in == 0 || s.out == 0) throw ConfigError(where + "dims must be positive");
                if (spatial) throw ConfigError(where + "dense layer fed by a spatial tensor; insert flatten");
                if (width && *width != s.in)
                    throw ConfigError(where + "expects " + std::to_string(s.in) + " inputs, previous layer gives " +
                                      std::to_string(*width));
                width = s.out;
                break;
            case LayerKind::conv2d:
                if (s.in == 0 || s.out == 0 || s.kernel == 0 || s.stride == 0)
                    throw ConfigError(where + "dims must be positive");
                if (width) throw ConfigError(where + "conv2d cannot follow a flat feature layer");
                if (channels && *channels != s.in)
                    throw ConfigError(where + "expects " + std::to_string(s.in) + " channels, previous layer gives " +
                                      std::to_string(*channels));
                channels = s.out;
                spatial = true;
                break;
            case LayerKind::relu: break;
            case LayerKind::flatten:
                if (spatial && channels) {
                    spatial = false;
                    width.reset();  // depends on the spatial extent
                }
                break;
        }
    }
}

/// Per-sample output shape for a per-sample input shape (batch dimension excluded).
inline Shape output_shape(std::span<const LayerSpec> specs, Shape sample) {
    validate_specs(specs);
    for (std::size_t i = 0; i < specs.size(); ++i) {
        const auto& s = specs[i];
        const auto idx = static_cast<std::ptrdiff_t>(i);
        switch (s.kind) {
            case LayerKind::dense:
                if (sample.size() != 1 || sample[0] != s.in)
                    throw ShapeError("dense expects [" + std::to_string(s.in) + "], got " + shape_string(sample), idx);
                sample = {s.out};
                break;
            case LayerKind::conv2d:
                if (sample.size() != 3 || sample[0] != s.in || sample[1] < s.kernel || sample[2] < s.kernel)
                    throw ShapeError("conv2d expects [" + std::to_string(s.in) + "xHxW] with H,W >= " +
                                         std::to_string(s.kernel) + ", got " + shape_string(sample),
                                     idx);
                sample = {s.out, (sample[1] - s.kernel) / s.stride + 1, (sample[2] - s.kernel) / s.stride + 1};
                break;
            case LayerKind::relu: break;
            case LayerKind::flatten: sample = {shape_size(sample)}; break;
        }
    }
    return sample;
}

struct Layer {
    LayerSpec spec;
    Tensor weight;
    Tensor bias;
};

namespace detail {
inline std::uint64_t next_version() {
    static std::atomic<std::uint64_t> counter{0};
    return ++counter;
}
}  // namespace detail

/// Parameters of one sequential network (one slice of a participant's model).
/// Every mutation draws a fresh version stamp so tapes recorded against older
/// parameters are rejected by backward().
class Network {
public:
    Network() = default;
    explicit Network(std::vector<Layer> layers) : layers_(std::move(layers)), version_(detail::next_version()) {
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            const auto& l = layers_[i];
            if (l.weight.shape() != l.spec.weight_shape() || l.bias.shape() != l.spec.bias_shape())
                throw ShapeError("parameter tensors do not match layer spec", static_cast<std::ptrdiff_t>(i));
        }
    }

    std::span<const Layer> layers() const noexcept { return layers_; }
    std::size_t layer_count() const noexcept { return layers_.size(); }
    std::uint64_t version() const noexcept { return version_; }

    LayerSpecs specs() const {
        LayerSpecs s;
        for (const auto& l : layers_) s.push_back(l.spec);
        return s;
    }

    /// Parameter tensors in order (weight, bias) per parametric layer.
    std::vector<Tensor> tensors() const {
        std::vector<Tensor> out;
        for (const auto& l : layers_)
            if (l.spec.has_params()) {
                out.push_back(l.weight);
                out.push_back(l.bias);
            }
        return out;
    }

    /// Replaces all parameter tensors; shapes must match tensors().
    void assign(std::span<const Tensor> values) {
        std::size_t k = 0;
        for (const auto& l : layers_)
            if (l.spec.has_params()) k += 2;
        if (values.size() != k) throw ShapeError("assign: expected " + std::to_string(k) + " tensors");
        k = 0;
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            if (!layers_[i].spec.has_params()) continue;
            if (values[k].shape() != layers_[i].weight.shape() || values[k + 1].shape() != layers_[i].bias.shape())
                throw ShapeError("assign: parameter shape mismatch", static_cast<std::ptrdiff_t>(i));
            k += 2;
        }
        k = 0;
        for (auto& l : layers_) {
            if (!l.spec.has_params()) continue;
            l.weight = values[k++];
            l.bias = values[k++];
        }
        version_ = detail::next_version();
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& l : layers_) n += l.weight.size() + l.bias.size();
        return n;
    }

    /// Flat view over every scalar parameter, in tensors() order.
    double parameter(std::size_t flat) const { return *locate(flat); }
    void set_parameter(std::size_t flat, double value) {
        *const_cast<double*>(locate(flat)) = value;
        version_ = detail::next_version();
    }

    /// Bitwise parameter equality; version stamps are ignored.
    friend bool same_parameters(const Network& a, const Network& b) {
        if (a.layers_.size() != b.layers_.size()) return false;
        for (std::size_t i = 0; i < a.layers_.size(); ++i) {
            const auto& x = a.layers_[i];
            const auto& y = b.layers_[i];
            if (!(x.spec == y.spec) || !(x.weight == y.weight) || !(x.bias == y.bias)) return false;
        }
        return true;
    }

private:
    friend class GradientBuffer;
    friend void sgd_step(Network&, const class GradientBuffer&, double);

    const double* locate(std::size_t flat) const {
        for (const auto& l : layers_) {
            if (flat < l.weight.size()) return l.weight.raw() + flat;
            flat -= l.weight.size();
            if (flat < l.bias.size()) return l.bias.raw() + flat;
            flat -= l.bias.size();
        }
        throw DomainError("parameter index out of range");
    }

    std::vector<Layer> layers_;
    std::uint64_t version_ = 0;
};

/// Gradients for every parameter tensor of one Network, layer-aligned.
class GradientBuffer {
public:
    GradientBuffer() = default;
    explicit GradientBuffer(const Network& net) {
        for (const auto& l : net.layers_) {
            weight_.push_back(l.spec.has_params() ? Tensor(l.weight.shape()) : Tensor());
            bias_.push_back(l.spec.has_params() ? Tensor(l.bias.shape()) : Tensor());
        }
    }

    std::size_t layer_count() const noexcept { return weight_.size(); }
    Tensor& weight(std::size_t layer) { return weight_.at(layer); }
    const Tensor& weight(std::size_t layer) const { return weight_.at(layer); }
    Tensor& bias(std::size_t layer) { return bias_.at(layer); }
    const Tensor& bias(std::size_t layer) const { return bias_.at(layer); }

    void zero() {
        for (auto& t : weight_) t.fill(0.0);
        for (auto& t : bias_) t.fill(0.0);
    }

    bool all_finite() const {
        for (std::size_t i = 0; i < weight_.size(); ++i)
            if (!weight_[i].all_finite() || !bias_[i].all_finite()) return false;
        return true;
    }

    bool congruent_with(const Network& net) const {
        if (net.layers_.size() != weight_.size()) return false;
        for (std::size_t i = 0; i < weight_.size(); ++i)
            if (net.layers_[i].weight.shape() != weight_[i].shape() || net.layers_[i].bias.shape() != bias_[i].shape())
                return false;
        return true;
    }

    GradientBuffer& operator+=(const GradientBuffer& o) {
        if (o.weight_.size() != weight_.size()) throw ShapeError("gradient buffers have different layer counts");
        for (std::size_t i = 0; i < weight_.size(); ++i) {
            weight_[i] += o.weight_[i];
            bias_[i] += o.bias_[i];
        }
        return *this;
    }

    /// Gradient of the parameter at flat index (Network::parameter ordering).
    double flat(std::size_t index) const {
        for (std::size_t i = 0; i < weight_.size(); ++i) {
            if (index < weight_[i].size()) return weight_[i][index];
            index -= weight_[i].size();
            if (index < bias_[i].size()) return bias_[i][index];
            index -= bias_[i].size();
        }
        throw DomainError("gradient index out of range");
    }

    friend bool operator==(const GradientBuffer&, const GradientBuffer&) = default;

private:
    std::vector<Tensor> weight_;
    std::vector<Tensor> bias_;
};

/// Per-layer inputs captured by a recording forward pass.
struct Tape {
    std::uint64_t version = 0;
    std::vector<Tensor> inputs;  // inputs[i] is the input of layer i
};

struct ForwardResult {
    Tensor output;
    std::optional<Tape> tape;
};

struct BackwardResult {
    Tensor input_grad;
    GradientBuffer grads;
};

namespace detail {

inline Tensor dense_forward(const Layer& l, const Tensor& x, std::ptrdiff_t idx) {
    if (x.rank() != 2 || x.dim(1) != l.spec.in)
        throw ShapeError("dense expects [Bx" + std::to_string(l.spec.in) + "], got " + shape_string(x.shape()), idx);
    const std::size_t batch = x.dim(0), in = l.spec.in, out = l.spec.out;
    Tensor y({batch, out});
    const double* w = l.weight.raw();
    for (std::size_t b = 0; b < batch; ++b) {
        double* yr = y.raw() + b * out;
        std::copy_n(l.bias.raw(), out, yr);
        const double* xr = x.raw() + b * in;
        for (std::size_t i = 0; i < in; ++i) {
            const double xi = xr[i];
            if (xi == 0.0) continue;
            const double* wr = w + i * out;
            for (std::size_t o = 0; o < out; ++o) yr[o] += xi * wr[o];
        }
    }
    return y;
}

inline Tensor dense_backward(const Layer& l, const Tensor& x, const Tensor& g, Tensor& dw, Tensor& db) {
    const std::size_t batch = x.dim(0), in = l.spec.in, out = l.spec.out;
    Tensor dx({batch, in});
    const double* w = l.weight.raw();
    for (std::size_t b = 0; b < batch; ++b) {
        const double* gr = g.raw() + b * out;
        const double* xr = x.raw() + b * in;
        double* dxr = dx.raw() + b * in;
        for (std::size_t o = 0; o < out; ++o) db[o] += gr[o];
        for (std::size_t i = 0; i < in; ++i) {
            const double* wr = w + i * out;
            double* dwr = dw.raw() + i * out;
            const double xi = xr[i];
            double acc = 0.0;
            for (std::size_t o = 0; o < out; ++o) {
                acc += wr[o] * gr[o];
                dwr[o] += xi * gr[o];
            }
            dxr[i] = acc;
        }
    }
    return dx;
}

inline Tensor conv_forward(const Layer& l, const Tensor& x, std::ptrdiff_t idx) {
    const auto& s = l.spec;
    if (x.rank() != 4 || x.dim(1) != s.in || x.dim(2) < s.kernel || x.dim(3) < s.kernel)
        throw ShapeError("conv2d expects [Bx" + std::to_string(s.in) + "xHxW] with H,W >= " +
                             std::to_string(s.kernel) + ", got " + shape_string(x.shape()),
                         idx);
    const std::size_t batch = x.dim(0), h = x.dim(2), w = x.dim(3), k = s.kernel, st = s.stride;
    const std::size_t oh = (h - k) / st + 1, ow = (w - k) / st + 1;
    Tensor y({batch, s.out, oh, ow});
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t o = 0; o < s.out; ++o) {
            double* yp = y.raw() + ((b * s.out + o) * oh) * ow;
            std::fill_n(yp, oh * ow, l.bias[o]);
            for (std::size_t c = 0; c < s.in; ++c) {
                const double* xp = x.raw() + ((b * s.in + c) * h) * w;
                const double* wp = l.weight.raw() + ((o * s.in + c) * k) * k;
                for (std::size_t ky = 0; ky < k; ++ky)
                    for (std::size_t kx = 0; kx < k; ++kx) {
                        const double wv = wp[ky * k + kx];
                        for (std::size_t oy = 0; oy < oh; ++oy) {
                            const double* xr = xp + (oy * st + ky) * w + kx;
                            double* yr = yp + oy * ow;
                            for (std::size_t ox = 0; ox < ow; ++ox) yr[ox] += wv * xr[ox * st];
                        }
                    }
            }
        }
    return y;
}

inline Tensor conv_backward(const Layer& l, const Tensor& x, const Tensor& g, Tensor& dw, Tensor& db) {
    const auto& s = l.spec;
    const std::size_t batch = x.dim(0), h = x.dim(2), w = x.dim(3), k = s.kernel, st = s.stride;
    const std::size_t oh = g.dim(2), ow = g.dim(3);
    Tensor dx(x.shape());
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t o = 0; o < s.out; ++o) {
            const double* gp = g.raw() + ((b * s.out + o) * oh) * ow;
            double bsum = 0.0;
            for (std::size_t i = 0; i < oh * ow; ++i) bsum += gp[i];
            db[o] += bsum;
            for (std::size_t c = 0; c < s.in; ++c) {
                const double* xp = x.raw() + ((b * s.in + c) * h) * w;
                double* dxp = dx.raw() + ((b * s.in + c) * h) * w;
                const double* wp = l.weight.raw() + ((o * s.in + c) * k) * k;
                double* dwp = dw.raw() + ((o * s.in + c) * k) * k;
                for (std::size_t ky = 0; ky < k; ++ky)
                    for (std::size_t kx = 0; kx < k; ++kx) {
                        const double wv = wp[ky * k + kx];
                        double acc = 0.0;
                        for (std::size_t oy = 0; oy < oh; ++oy) {
                            const std::size_t off = (oy * st + ky) * w + kx;
                            const double* xr = xp + off;
                            double* dxr = dxp + off;
                            const double* gr = gp + oy * ow;
                            for (std::size_t ox = 0; ox < ow; ++ox) {
                                acc += gr[ox] * xr[ox * st];
                                dxr[ox * st] += wv * gr[ox];
                            }
                        }
                        dwp[ky * k + kx] += acc;
                    }
            }
        }
    return dx;
}

}  // namespace detail

/// Runs the network on a batch. With record set, the returned tape holds every
/// layer input and the parameter version it was computed against.
inline ForwardResult forward(const Network& net, const Tensor& input, bool record = false) {
    ForwardResult result;
    if (record) result.tape = Tape{net.version(), {}};
    Tensor x = input;
    const auto layers = net.layers();
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const auto& l = layers[i];
        const auto idx = static_cast<std::ptrdiff_t>(i);
        if (x.rank() < 2) throw ShapeError("input must be batch-first, got " + shape_string(x.shape()), idx);
        Tensor y;
        switch (l.spec.kind) {
            case LayerKind::dense: y = detail::dense_forward(l, x, idx); break;
            case LayerKind::conv2d: y = detail::conv_forward(l, x, idx); break;
            case LayerKind::relu:
                y = x;
                for (auto& v : y.data()) v = v > 0.0 ? v : 0.0;
                break;
            case LayerKind::flatten: y = x.reshaped({x.dim(0), x.row_size()}); break;
        }
        if (record) result.tape->inputs.push_back(std::move(x));
        x = std::move(y);
    }
    result.output = std::move(x);
    return result;
}

/// Backpropagates output_grad through the layers recorded on the tape.
inline BackwardResult backward(const Network& net, const Tape& tape, const Tensor& output_grad) {
    if (tape.version != net.version())
        throw ProtocolError("tape was recorded against parameter version " + std::to_string(tape.version) +
                            ", network is at " + std::to_string(net.version()));
    const auto layers = net.layers();
    if (tape.inputs.size() != layers.size()) throw ProtocolError("tape does not match network depth");

    BackwardResult result{Tensor{}, GradientBuffer(net)};
    Tensor g = output_grad;
    for (std::size_t r = layers.size(); r-- > 0;) {
        const auto& l = layers[r];
        const Tensor& x = tape.inputs[r];
        const auto idx = static_cast<std::ptrdiff_t>(r);
        switch (l.spec.kind) {
            case LayerKind::dense:
                if (g.shape() != Shape{x.dim(0), l.spec.out}) throw ShapeError("gradient shape mismatch", idx);
                g = detail::dense_backward(l, x, g, result.grads.weight(r), result.grads.bias(r));
                break;
            case LayerKind::conv2d: {
                const auto& s = l.spec;
                const Shape expect{x.dim(0), s.out, (x.dim(2) - s.kernel) / s.stride + 1,
                                   (x.dim(3) - s.kernel) / s.stride + 1};
                if (g.shape() != expect) throw ShapeError("gradient shape mismatch", idx);
                g = detail::conv_backward(l, x, g, result.grads.weight(r), result.grads.bias(r));
                break;
            }
            case LayerKind::relu:
                if (g.shape() != x.shape()) throw ShapeError("gradient shape mismatch", idx);
                for (std::size_t i = 0; i < g.size(); ++i)
                    if (!(x[i] > 0.0)) g[i] = 0.0;
                break;
            case LayerKind::flatten:
                if (g.size() != x.size()) throw ShapeError("gradient shape mismatch", idx);
                g.reshape(x.shape());
                break;
        }
    }
    result.input_grad = std::move(g);
    return result;
}

/// Gradient-reversal layer: identity forward.
inline const Tensor& grl_forward(const Tensor& x) noexcept { return x; }

/// Gradient-reversal layer: negated gradient backward.
inline Tensor grl_backward(const Tensor& output_grad) {
    Tensor g = output_grad;
    for (auto& v : g.data()) v = -v;
    return g;
}

/// theta <- theta - eta * grad. Refuses the whole step if any gradient is non-finite.
inline void sgd_step(Network& net, const GradientBuffer& grads, double eta) {
    if (!(eta > 0.0) || !std::isfinite(eta)) throw ConfigError("learning rate must be positive and finite");
    if (!grads.congruent_with(net)) throw ShapeError("gradient buffer is not congruent with the network");
    if (!grads.all_finite()) throw NumericError("non-finite gradient; step refused");
    for (std::size_t i = 0; i < net.layers_.size(); ++i) {
        auto& l = net.layers_[i];
        const auto& dw = grads.weight(i);
        const auto& db = grads.bias(i);
        for (std::size_t j = 0; j < l.weight.size(); ++j) l.weight[j] -= eta * dw[j];
        for (std::size_t j = 0; j < l.bias.size(); ++j) l.bias[j] -= eta * db[j];
    }
    net.version_ = detail::next_version();
}

/// Zero-mean normal weights with standard deviation 1/sqrt(fan_in); zero biases.
inline Network init_params(std::span<const LayerSpec> specs, std::uint64_t seed) {
    validate_specs(specs);
    Rng rng = make_rng(seed);
    std::vector<Layer> layers;
    for (const auto& s : specs) {
        Layer l{s, {}, {}};
        if (s.has_params()) {
            l.weight = Tensor(s.weight_shape());
            l.bias = Tensor(s.bias_shape());
            std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(s.fan_in())));
            for (auto& v : l.weight.data()) v = dist(rng);
        }
        layers.push_back(std::move(l));
    }
    return Network(std::move(layers));
}

/// Validates specs against a per-sample input shape, then initializes.
inline Network init_params(std::span<const LayerSpec> specs, const Shape& sample_shape, std::uint64_t seed) {
    (void)output_shape(specs, sample_shape);
    return init_params(specs, seed);
}

}  // namespace aftl
