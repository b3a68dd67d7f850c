#include "randlab/nn.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace randlab {

namespace {

// f64 accumulation for all reductions; inputs stay f32.
double dot_f64(const float* a, const float* b, int64_t n) {
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    return acc;
}

void axpy_f64(double* acc, float a, const float* x, int64_t n) {
    const double ad = a;
    for (int64_t i = 0; i < n; ++i) acc[i] += ad * static_cast<double>(x[i]);
}

struct ConvDims {
    int c, h, w, f, k, s, oh, ow;
    int64_t ckk, opix;
};

ConvDims conv_dims(const Conv2D& conv, const std::vector<int>& in_shape) {
    ConvDims d;
    d.c = in_shape[0];
    d.h = in_shape[1];
    d.w = in_shape[2];
    d.f = conv.filters;
    d.k = conv.kernel;
    d.s = conv.stride;
    d.oh = (d.h - d.k) / d.s + 1;
    d.ow = (d.w - d.k) / d.s + 1;
    d.ckk = static_cast<int64_t>(d.c) * d.k * d.k;
    d.opix = static_cast<int64_t>(d.oh) * d.ow;
    return d;
}

// col[k][p] layout with contiguous p rows, k = (c*K+u)*K+v, p = oy*OW+ox.
void im2col(const float* in, const ConvDims& d, float* col) {
    for (int c = 0; c < d.c; ++c) {
        for (int u = 0; u < d.k; ++u) {
            for (int v = 0; v < d.k; ++v) {
                float* row = col + ((static_cast<int64_t>(c) * d.k + u) * d.k + v) * d.opix;
                for (int oy = 0; oy < d.oh; ++oy) {
                    const float* src = in + (static_cast<int64_t>(c) * d.h + (oy * d.s + u)) * d.w + v;
                    float* dst = row + static_cast<int64_t>(oy) * d.ow;
                    if (d.s == 1) {
                        std::copy(src, src + d.ow, dst);
                    } else {
                        for (int ox = 0; ox < d.ow; ++ox) dst[ox] = src[ox * d.s];
                    }
                }
            }
        }
    }
}

std::vector<int> with_batch(int n, const std::vector<int>& shape) {
    std::vector<int> s;
    s.reserve(shape.size() + 1);
    s.push_back(n);
    s.insert(s.end(), shape.begin(), shape.end());
    return s;
}

std::string shape_to_str(const std::vector<int>& s) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << 'x';
        os << s[i];
    }
    os << ']';
    return os.str();
}

}  // namespace

std::string layer_name(const LayerDesc& layer) {
    return std::visit(
        [](const auto& l) -> std::string {
            using T = std::decay_t<decltype(l)>;
            if constexpr (std::is_same_v<T, Conv2D>) return "Conv2D";
            else if constexpr (std::is_same_v<T, MaxPool>) return "MaxPool";
            else if constexpr (std::is_same_v<T, ReLU>) return "ReLU";
            else if constexpr (std::is_same_v<T, Flatten>) return "Flatten";
            else if constexpr (std::is_same_v<T, Dense>) return "Dense";
            else return "OutputLogits";
        },
        layer);
}

std::vector<std::vector<int>> Architecture::layer_shapes() const {
    if (layers.empty()) throw std::invalid_argument("architecture has no layers");
    if (input_shape.empty()) throw std::invalid_argument("architecture has no input shape");
    if (!std::holds_alternative<OutputLogits>(layers.back())) {
        throw std::invalid_argument("last layer must be OutputLogits");
    }
    std::vector<std::vector<int>> shapes;
    shapes.push_back(input_shape);
    std::vector<int> cur = input_shape;
    for (size_t li = 0; li < layers.size(); ++li) {
        const LayerDesc& layer = layers[li];
        const std::string where = layer_name(layer) + " (layer " + std::to_string(li) + ")";
        if (std::holds_alternative<OutputLogits>(layer) && li + 1 != layers.size()) {
            throw std::invalid_argument("OutputLogits must be the last layer");
        }
        if (const auto* conv = std::get_if<Conv2D>(&layer)) {
            if (cur.size() != 3) throw std::invalid_argument(where + " expects CxHxW input, got " + shape_to_str(cur));
            if (conv->filters < 1 || conv->kernel < 1 || conv->stride < 1) {
                throw std::invalid_argument(where + " has invalid dims");
            }
            if (cur[1] < conv->kernel || cur[2] < conv->kernel) {
                throw std::invalid_argument(where + " kernel larger than input " + shape_to_str(cur));
            }
            cur = {conv->filters, (cur[1] - conv->kernel) / conv->stride + 1,
                   (cur[2] - conv->kernel) / conv->stride + 1};
        } else if (const auto* pool = std::get_if<MaxPool>(&layer)) {
            if (cur.size() != 3) throw std::invalid_argument(where + " expects CxHxW input, got " + shape_to_str(cur));
            if (pool->kernel < 1 || cur[1] < pool->kernel || cur[2] < pool->kernel) {
                throw std::invalid_argument(where + " kernel larger than input " + shape_to_str(cur));
            }
            cur = {cur[0], cur[1] / pool->kernel, cur[2] / pool->kernel};
        } else if (std::holds_alternative<ReLU>(layer)) {
            // shape preserved
        } else if (std::holds_alternative<Flatten>(layer)) {
            cur = {static_cast<int>(Tensor::shape_numel(cur))};
        } else if (const auto* dense = std::get_if<Dense>(&layer)) {
            if (cur.size() != 1) throw std::invalid_argument(where + " expects flat input, got " + shape_to_str(cur));
            if (dense->out_dim < 1) throw std::invalid_argument(where + " has invalid out_dim");
            cur = {dense->out_dim};
        } else if (const auto* out = std::get_if<OutputLogits>(&layer)) {
            if (cur.size() != 1) throw std::invalid_argument(where + " expects flat input, got " + shape_to_str(cur));
            if (out->num_classes < 2) throw std::invalid_argument(where + " needs >= 2 classes");
            cur = {out->num_classes};
        }
        shapes.push_back(cur);
    }
    return shapes;
}

int Architecture::num_classes() const {
    if (layers.empty() || !std::holds_alternative<OutputLogits>(layers.back())) {
        throw std::invalid_argument("architecture lacks an OutputLogits tail");
    }
    return std::get<OutputLogits>(layers.back()).num_classes;
}

Architecture Architecture::mnist_desk() {
    Architecture a;
    a.input_shape = {1, 28, 28};
    a.layers = {Conv2D{32, 3, 1}, ReLU{}, MaxPool{2}, Flatten{}, Dense{64}, ReLU{}, OutputLogits{10}};
    a.validate();
    return a;
}

Architecture Architecture::mlp(std::vector<int> input_shape, std::vector<int> hidden, int num_classes) {
    Architecture a;
    a.input_shape = std::move(input_shape);
    if (a.input_shape.size() > 1) a.layers.push_back(Flatten{});
    for (int h : hidden) {
        a.layers.push_back(Dense{h});
        a.layers.push_back(ReLU{});
    }
    a.layers.push_back(OutputLogits{num_classes});
    a.validate();
    return a;
}

int64_t Model::num_params() const {
    int64_t n = 0;
    for (const auto& p : params) n += p.w.numel() + p.b.numel();
    return n;
}

void Model::check_finite() const {
    for (size_t i = 0; i < params.size(); ++i) {
        params[i].w.check_finite("params of layer " + std::to_string(i));
        params[i].b.check_finite("bias of layer " + std::to_string(i));
    }
}

Model init_model(const Architecture& arch, uint64_t seed) {
    const auto shapes = arch.layer_shapes();
    Model m;
    m.arch = arch;
    m.train_seed = seed;
    m.params.resize(arch.layers.size());
    Rng rng(mix_seed(seed, 0x1717));
    for (size_t li = 0; li < arch.layers.size(); ++li) {
        const auto& in = shapes[li];
        if (const auto* conv = std::get_if<Conv2D>(&arch.layers[li])) {
            const int fan_in = in[0] * conv->kernel * conv->kernel;
            const int fan_out = conv->filters * conv->kernel * conv->kernel;
            const double limit = std::sqrt(6.0 / (fan_in + fan_out));
            Tensor w({conv->filters, in[0], conv->kernel, conv->kernel});
            for (int64_t i = 0; i < w.numel(); ++i) w[i] = static_cast<float>(rng.uniform(-limit, limit));
            m.params[li].w = std::move(w);
            m.params[li].b = Tensor({conv->filters});
        } else if (const auto* dense = std::get_if<Dense>(&arch.layers[li])) {
            const double limit = std::sqrt(6.0 / (in[0] + dense->out_dim));
            Tensor w({dense->out_dim, in[0]});
            for (int64_t i = 0; i < w.numel(); ++i) w[i] = static_cast<float>(rng.uniform(-limit, limit));
            m.params[li].w = std::move(w);
            m.params[li].b = Tensor({dense->out_dim});
        } else if (const auto* out = std::get_if<OutputLogits>(&arch.layers[li])) {
            const double limit = std::sqrt(6.0 / (in[0] + out->num_classes));
            Tensor w({out->num_classes, in[0]});
            for (int64_t i = 0; i < w.numel(); ++i) w[i] = static_cast<float>(rng.uniform(-limit, limit));
            m.params[li].w = std::move(w);
            m.params[li].b = Tensor({out->num_classes});
        }
    }
    return m;
}

namespace {

Tensor conv_forward(const Tensor& in, const ConvDims& d, const LayerParams& p) {
    const int n = in.dim(0);
    Tensor out(with_batch(n, {d.f, d.oh, d.ow}));
    std::vector<float> col(static_cast<size_t>(d.ckk * d.opix));
    std::vector<double> acc(static_cast<size_t>(d.opix));
    const int64_t in_stride = static_cast<int64_t>(d.c) * d.h * d.w;
    const int64_t out_stride = static_cast<int64_t>(d.f) * d.opix;
    for (int s = 0; s < n; ++s) {
        im2col(in.data() + s * in_stride, d, col.data());
        for (int f = 0; f < d.f; ++f) {
            std::fill(acc.begin(), acc.end(), 0.0);
            const float* wf = p.w.data() + static_cast<int64_t>(f) * d.ckk;
            for (int64_t k = 0; k < d.ckk; ++k) {
                axpy_f64(acc.data(), wf[k], col.data() + k * d.opix, d.opix);
            }
            float* dst = out.data() + s * out_stride + static_cast<int64_t>(f) * d.opix;
            const double bias = p.b[f];
            for (int64_t i = 0; i < d.opix; ++i) dst[i] = static_cast<float>(acc[i] + bias);
        }
    }
    return out;
}

void conv_backward(const Tensor& in, const Tensor& dout, const ConvDims& d, const LayerParams& p,
                   LayerParams* pgrad, Tensor* din) {
    const int n = in.dim(0);
    std::vector<float> col(static_cast<size_t>(d.ckk * d.opix));
    std::vector<double> dw(static_cast<size_t>(d.f * d.ckk), 0.0);
    std::vector<double> db(static_cast<size_t>(d.f), 0.0);
    std::vector<double> dcol_row(static_cast<size_t>(d.opix));
    const int64_t in_stride = static_cast<int64_t>(d.c) * d.h * d.w;
    const int64_t out_stride = static_cast<int64_t>(d.f) * d.opix;
    std::vector<double> din_acc;
    if (din) {
        *din = Tensor(in.shape());
        din_acc.resize(static_cast<size_t>(in_stride));
    }
    for (int s = 0; s < n; ++s) {
        im2col(in.data() + s * in_stride, d, col.data());
        const float* go = dout.data() + s * out_stride;
        if (pgrad) {
            for (int f = 0; f < d.f; ++f) {
                const float* gf = go + static_cast<int64_t>(f) * d.opix;
                double bacc = 0.0;
                for (int64_t i = 0; i < d.opix; ++i) bacc += gf[i];
                db[static_cast<size_t>(f)] += bacc;
                double* dwf = dw.data() + static_cast<int64_t>(f) * d.ckk;
                for (int64_t k = 0; k < d.ckk; ++k) {
                    dwf[k] += dot_f64(gf, col.data() + k * d.opix, d.opix);
                }
            }
        }
        if (din) {
            std::fill(din_acc.begin(), din_acc.end(), 0.0);
            for (int64_t k = 0; k < d.ckk; ++k) {
                std::fill(dcol_row.begin(), dcol_row.end(), 0.0);
                for (int f = 0; f < d.f; ++f) {
                    axpy_f64(dcol_row.data(), p.w[static_cast<int64_t>(f) * d.ckk + k],
                             go + static_cast<int64_t>(f) * d.opix, d.opix);
                }
                const int c = static_cast<int>(k / (d.k * d.k));
                const int u = static_cast<int>((k / d.k) % d.k);
                const int v = static_cast<int>(k % d.k);
                for (int oy = 0; oy < d.oh; ++oy) {
                    double* drow = din_acc.data() + (static_cast<int64_t>(c) * d.h + (oy * d.s + u)) * d.w + v;
                    const double* src = dcol_row.data() + static_cast<int64_t>(oy) * d.ow;
                    for (int ox = 0; ox < d.ow; ++ox) drow[ox * d.s] += src[ox];
                }
            }
            float* dst = din->data() + s * in_stride;
            for (int64_t i = 0; i < in_stride; ++i) dst[i] = static_cast<float>(din_acc[i]);
        }
    }
    if (pgrad) {
        pgrad->w = Tensor(p.w.shape());
        pgrad->b = Tensor(p.b.shape());
        for (int64_t i = 0; i < pgrad->w.numel(); ++i) (*pgrad).w[i] = static_cast<float>(dw[static_cast<size_t>(i)]);
        for (int64_t i = 0; i < pgrad->b.numel(); ++i) (*pgrad).b[i] = static_cast<float>(db[static_cast<size_t>(i)]);
    }
}

Tensor dense_forward(const Tensor& in, const LayerParams& p) {
    const int n = in.dim(0);
    const int64_t din = in.numel() / n;
    const int dout = p.w.dim(0);
    Tensor out(with_batch(n, {dout}));
    for (int s = 0; s < n; ++s) {
        const float* x = in.data() + s * din;
        float* y = out.data() + static_cast<int64_t>(s) * dout;
        for (int o = 0; o < dout; ++o) {
            y[o] = static_cast<float>(dot_f64(x, p.w.data() + static_cast<int64_t>(o) * din, din) +
                                      static_cast<double>(p.b[o]));
        }
    }
    return out;
}

void dense_backward(const Tensor& in, const Tensor& dout, const LayerParams& p, LayerParams* pgrad,
                    Tensor* din_out) {
    const int n = in.dim(0);
    const int64_t din = in.numel() / n;
    const int dout_dim = p.w.dim(0);
    if (pgrad) {
        std::vector<double> dw(static_cast<size_t>(dout_dim * din), 0.0);
        std::vector<double> db(static_cast<size_t>(dout_dim), 0.0);
        for (int s = 0; s < n; ++s) {
            const float* x = in.data() + s * din;
            const float* g = dout.data() + static_cast<int64_t>(s) * dout_dim;
            for (int o = 0; o < dout_dim; ++o) {
                db[static_cast<size_t>(o)] += g[o];
                axpy_f64(dw.data() + static_cast<int64_t>(o) * din, g[o], x, din);
            }
        }
        pgrad->w = Tensor(p.w.shape());
        pgrad->b = Tensor(p.b.shape());
        for (int64_t i = 0; i < pgrad->w.numel(); ++i) pgrad->w[i] = static_cast<float>(dw[static_cast<size_t>(i)]);
        for (int64_t i = 0; i < pgrad->b.numel(); ++i) pgrad->b[i] = static_cast<float>(db[static_cast<size_t>(i)]);
    }
    if (din_out) {
        *din_out = Tensor(in.shape());
        std::vector<double> acc(static_cast<size_t>(din));
        for (int s = 0; s < n; ++s) {
            const float* g = dout.data() + static_cast<int64_t>(s) * dout_dim;
            std::fill(acc.begin(), acc.end(), 0.0);
            for (int o = 0; o < dout_dim; ++o) {
                axpy_f64(acc.data(), g[o], p.w.data() + static_cast<int64_t>(o) * din, din);
            }
            float* dst = din_out->data() + s * din;
            for (int64_t i = 0; i < din; ++i) dst[i] = static_cast<float>(acc[i]);
        }
    }
}

}  // namespace

Tensor forward(const Model& model, const Tensor& batch, ForwardTrace* trace) {
    const auto shapes = model.arch.layer_shapes();
    if (batch.ndim() != static_cast<int>(model.arch.input_shape.size()) + 1 ||
        !std::equal(model.arch.input_shape.begin(), model.arch.input_shape.end(), batch.shape().begin() + 1)) {
        throw std::invalid_argument("forward: batch shape " + batch.shape_str() + " does not match input shape " +
                                    shape_to_str(model.arch.input_shape) + " (expected [N x input_shape])");
    }
    const int n = batch.dim(0);
    if (n < 1) throw std::invalid_argument("forward: empty batch");

    Tensor cur = batch;
    if (trace) {
        trace->acts.clear();
        trace->pool_idx.assign(model.arch.layers.size(), {});
        trace->acts.push_back(cur);
    }
    for (size_t li = 0; li < model.arch.layers.size(); ++li) {
        const LayerDesc& layer = model.arch.layers[li];
        if (const auto* conv = std::get_if<Conv2D>(&layer)) {
            cur = conv_forward(cur, conv_dims(*conv, shapes[li]), model.params[li]);
        } else if (const auto* pool = std::get_if<MaxPool>(&layer)) {
            const int c = shapes[li][0], h = shapes[li][1], w = shapes[li][2];
            const int k = pool->kernel, oh = h / k, ow = w / k;
            Tensor out(with_batch(n, {c, oh, ow}));
            std::vector<int32_t>* idx = nullptr;
            if (trace) {
                trace->pool_idx[li].assign(static_cast<size_t>(out.numel()), 0);
                idx = &trace->pool_idx[li];
            }
            const int64_t in_stride = static_cast<int64_t>(c) * h * w;
            int64_t o = 0;
            for (int s = 0; s < n; ++s) {
                const float* src = cur.data() + s * in_stride;
                for (int ci = 0; ci < c; ++ci) {
                    for (int oy = 0; oy < oh; ++oy) {
                        for (int ox = 0; ox < ow; ++ox, ++o) {
                            float best = -std::numeric_limits<float>::infinity();
                            int64_t best_i = -1;
                            for (int u = 0; u < k; ++u) {
                                for (int v = 0; v < k; ++v) {
                                    const int64_t i = (static_cast<int64_t>(ci) * h + (oy * k + u)) * w + (ox * k + v);
                                    if (src[i] > best) {
                                        best = src[i];
                                        best_i = i;
                                    }
                                }
                            }
                            out[o] = best;
                            if (idx) (*idx)[static_cast<size_t>(o)] = static_cast<int32_t>(s * in_stride + best_i);
                        }
                    }
                }
            }
            cur = std::move(out);
        } else if (std::holds_alternative<ReLU>(layer)) {
            Tensor out(cur.shape());
            for (int64_t i = 0; i < cur.numel(); ++i) out[i] = cur[i] > 0.0f ? cur[i] : 0.0f;
            cur = std::move(out);
        } else if (std::holds_alternative<Flatten>(layer)) {
            Tensor out(with_batch(n, shapes[li + 1]), std::vector<float>(cur.data(), cur.data() + cur.numel()));
            cur = std::move(out);
        } else if (std::holds_alternative<Dense>(layer) || std::holds_alternative<OutputLogits>(layer)) {
            cur = dense_forward(cur, model.params[li]);
        }
        if (trace) trace->acts.push_back(cur);
    }
    cur.check_finite("logits");
    return cur;
}

int argmax_lowest(const float* v, int n) {
    int best = 0;
    for (int i = 1; i < n; ++i) {
        if (v[i] > v[best]) best = i;
    }
    return best;
}

int predict(const Model& model, const Tensor& x) {
    Tensor batch = x;
    if (x.ndim() == static_cast<int>(model.arch.input_shape.size())) {
        batch = Tensor(with_batch(1, x.shape()), std::vector<float>(x.data(), x.data() + x.numel()));
    }
    const Tensor logits = forward(model, batch);
    return argmax_lowest(logits.data(), logits.dim(1));
}

std::vector<int> predict_batch(const Model& model, const Tensor& batch) {
    const Tensor logits = forward(model, batch);
    const int n = logits.dim(0), c = logits.dim(1);
    std::vector<int> out(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) out[static_cast<size_t>(i)] = argmax_lowest(logits.data() + static_cast<int64_t>(i) * c, c);
    return out;
}

double mean_cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
    const int n = logits.dim(0), c = logits.dim(1);
    if (static_cast<size_t>(n) != labels.size()) throw std::invalid_argument("labels/batch size mismatch");
    double total = 0.0;
    for (int s = 0; s < n; ++s) {
        const float* z = logits.data() + static_cast<int64_t>(s) * c;
        const int y = labels[static_cast<size_t>(s)];
        if (y < 0 || y >= c) throw std::invalid_argument("label out of range");
        double zmax = z[0];
        for (int i = 1; i < c; ++i) zmax = std::max(zmax, static_cast<double>(z[i]));
        double sum = 0.0;
        for (int i = 0; i < c; ++i) sum += std::exp(static_cast<double>(z[i]) - zmax);
        total += std::log(sum) + zmax - static_cast<double>(z[y]);
    }
    return total / n;
}

Tensor cross_entropy_dlogits(const Tensor& logits, const std::vector<int>& labels) {
    const int n = logits.dim(0), c = logits.dim(1);
    Tensor d(logits.shape());
    for (int s = 0; s < n; ++s) {
        const float* z = logits.data() + static_cast<int64_t>(s) * c;
        float* g = d.data() + static_cast<int64_t>(s) * c;
        double zmax = z[0];
        for (int i = 1; i < c; ++i) zmax = std::max(zmax, static_cast<double>(z[i]));
        double sum = 0.0;
        for (int i = 0; i < c; ++i) sum += std::exp(static_cast<double>(z[i]) - zmax);
        for (int i = 0; i < c; ++i) {
            g[i] = static_cast<float>(std::exp(static_cast<double>(z[i]) - zmax) / sum / n);
        }
        g[labels[static_cast<size_t>(s)]] -= 1.0f / static_cast<float>(n);
    }
    return d;
}

void backward(const Model& model, const ForwardTrace& trace, const Tensor& dlogits,
              Gradients* param_grads, Tensor* input_grad) {
    const auto shapes = model.arch.layer_shapes();
    const size_t nl = model.arch.layers.size();
    if (trace.acts.size() != nl + 1) throw std::invalid_argument("backward: trace does not match model");
    if (param_grads) param_grads->layers.assign(nl, {});

    Tensor grad = dlogits;
    for (size_t li = nl; li-- > 0;) {
        const LayerDesc& layer = model.arch.layers[li];
        const Tensor& in = trace.acts[li];
        const bool need_din = input_grad != nullptr || li > 0;
        Tensor din;
        if (const auto* conv = std::get_if<Conv2D>(&layer)) {
            conv_backward(in, grad, conv_dims(*conv, shapes[li]), model.params[li],
                          param_grads ? &param_grads->layers[li] : nullptr, need_din ? &din : nullptr);
        } else if (std::get_if<MaxPool>(&layer)) {
            if (need_din) {
                din = Tensor(in.shape());
                const auto& idx = trace.pool_idx[li];
                for (int64_t o = 0; o < grad.numel(); ++o) din[idx[static_cast<size_t>(o)]] += grad[o];
            }
        } else if (std::holds_alternative<ReLU>(layer)) {
            if (need_din) {
                din = Tensor(in.shape());
                for (int64_t i = 0; i < in.numel(); ++i) din[i] = in[i] > 0.0f ? grad[i] : 0.0f;
            }
        } else if (std::holds_alternative<Flatten>(layer)) {
            if (need_din) {
                din = Tensor(in.shape(), std::vector<float>(grad.data(), grad.data() + grad.numel()));
            }
        } else {
            dense_backward(in, grad, model.params[li], param_grads ? &param_grads->layers[li] : nullptr,
                           need_din ? &din : nullptr);
        }
        if (need_din) grad = std::move(din);
    }
    if (input_grad) *input_grad = std::move(grad);
}

Gradients grad_params(const Model& model, const Tensor& batch, const std::vector<int>& labels) {
    if (batch.ndim() < 1 || batch.dim(0) < 1 || labels.empty()) {
        throw std::invalid_argument("grad_params: empty batch");
    }
    ForwardTrace trace;
    const Tensor logits = forward(model, batch, &trace);
    const Tensor dlogits = cross_entropy_dlogits(logits, labels);
    Gradients grads;
    backward(model, trace, dlogits, &grads, nullptr);
    return grads;
}

namespace {

void cw_margin_terms(const float* z, int c, const CwMarginLoss& spec, double* term, int* pos, int* neg) {
    // targeted:   max_{i != t} z_i - z_t   (drive below -k)
    // untargeted: z_y - max_{i != y} z_i   with target = y
    int other = -1;
    for (int i = 0; i < c; ++i) {
        if (i == spec.target) continue;
        if (other < 0 || z[i] > z[other]) other = i;
    }
    if (spec.targeted) {
        *term = static_cast<double>(z[other]) - static_cast<double>(z[spec.target]);
        *pos = other;
        *neg = spec.target;
    } else {
        *term = static_cast<double>(z[spec.target]) - static_cast<double>(z[other]);
        *pos = spec.target;
        *neg = other;
    }
}

void check_loss_spec(const Model& model, const LossSpec& loss) {
    const int c = model.arch.num_classes();
    std::visit(
        [c](const auto& l) {
            using T = std::decay_t<decltype(l)>;
            int label;
            if constexpr (std::is_same_v<T, CrossEntropyLoss>) label = l.label;
            else label = l.target;
            if (label < 0 || label >= c) {
                throw std::invalid_argument("loss target " + std::to_string(label) + " out of class range [0," +
                                            std::to_string(c) + ")");
            }
        },
        loss);
}

Tensor single_batch(const Model& model, const Tensor& x) {
    if (x.ndim() == static_cast<int>(model.arch.input_shape.size())) {
        std::vector<int> s;
        s.push_back(1);
        s.insert(s.end(), x.shape().begin(), x.shape().end());
        return Tensor(s, std::vector<float>(x.data(), x.data() + x.numel()));
    }
    return x;
}

}  // namespace

double cw_loss(const Tensor& logits, int target, double k, bool targeted);  // attacks.cpp

Tensor grad_input(const Model& model, const Tensor& x, const LossSpec& loss) {
    check_loss_spec(model, loss);
    const Tensor batch = single_batch(model, x);
    ForwardTrace trace;
    const Tensor logits = forward(model, batch, &trace);
    const int c = logits.dim(1);
    Tensor dlogits({1, c});
    if (const auto* ce = std::get_if<CrossEntropyLoss>(&loss)) {
        dlogits = cross_entropy_dlogits(logits, {ce->label});
    } else {
        const auto& cw = std::get<CwMarginLoss>(loss);
        double term;
        int pos, neg;
        cw_margin_terms(logits.data(), c, cw, &term, &pos, &neg);
        if (term > -cw.k) {  // not floored: subgradient of the max-margin term
            dlogits[pos] = 1.0f;
            dlogits[neg] = -1.0f;
        }
    }
    Tensor g;
    backward(model, trace, dlogits, nullptr, &g);
    Tensor out(x.shape(), std::vector<float>(g.data(), g.data() + g.numel()));
    return out;
}

double loss_value(const Model& model, const Tensor& x, const LossSpec& loss) {
    check_loss_spec(model, loss);
    const Tensor batch = single_batch(model, x);
    const Tensor logits = forward(model, batch);
    if (const auto* ce = std::get_if<CrossEntropyLoss>(&loss)) {
        return mean_cross_entropy(logits, {ce->label});
    }
    const auto& cw = std::get<CwMarginLoss>(loss);
    double term;
    int pos, neg;
    cw_margin_terms(logits.data(), logits.dim(1), cw, &term, &pos, &neg);
    return std::max(term, -cw.k);
}

}  // namespace randlab
