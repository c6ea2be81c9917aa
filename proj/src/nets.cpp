#include "fedafd/nets.hpp"

#include <cmath>

namespace fedafd::nets {

Rng ParamStream::next() {
    return derive_stream(master, {static_cast<std::uint64_t>(StreamId::param_init), scope, counter++});
}

namespace {

Tensor uniform_fan_in(Shape shape, std::size_t fan_in, ParamStream& ps) {
    Rng rng = ps.next();
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = rng.uniform(-bound, bound);
    return Tensor::leaf(std::move(shape), std::move(v), true);
}

}  // namespace

LinearLayer make_linear(std::size_t in_dim, std::size_t out_dim, ParamStream& ps) {
    if (in_dim == 0 || out_dim == 0) throw ConfigError("linear layer: zero dimension");
    LinearLayer l;
    l.weight = uniform_fan_in(Shape{in_dim, out_dim}, in_dim, ps);
    l.bias = uniform_fan_in(Shape{1, out_dim}, in_dim, ps);
    return l;
}

Tensor linear_forward(const LinearLayer& l, const Tensor& x) {
    if (x.cols() != l.weight.rows())
        throw DimensionError("linear_forward: input width does not match layer");
    return add(matmul(x, l.weight), l.bias);
}

void collect_params(LinearLayer& l, std::vector<Tensor*>& out) {
    out.push_back(&l.weight);
    out.push_back(&l.bias);
}

BatchNormLayer make_batchnorm(std::size_t d) {
    BatchNormLayer bn;
    bn.gamma = Tensor::full(Shape{1, d}, 1.0, true);
    bn.beta = Tensor::zeros(Shape{1, d}, true);
    bn.running_mean.assign(d, 0.0);
    bn.running_var.assign(d, 1.0);
    return bn;
}

Tensor batchnorm_forward(BatchNormLayer& bn, const Tensor& x, BnMode mode) {
    const std::size_t d = x.cols();
    if (d != bn.running_mean.size()) throw DimensionError("batchnorm: feature width mismatch");
    Tensor normalized;
    if (mode == BnMode::train) {
        normalized = batchnorm_train(x);
        // Update running stats from the batch (unbiased variance).
        const std::size_t n = x.rows();
        const auto& v = x.values();
        for (std::size_t j = 0; j < d; ++j) {
            double mean = 0.0;
            for (std::size_t i = 0; i < n; ++i) mean += v[i * d + j];
            mean /= static_cast<double>(n);
            double var = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                const double c = v[i * d + j] - mean;
                var += c * c;
            }
            var /= static_cast<double>(n - 1);
            bn.running_mean[j] = (1.0 - bn.momentum) * bn.running_mean[j] + bn.momentum * mean;
            bn.running_var[j] = (1.0 - bn.momentum) * bn.running_var[j] + bn.momentum * var;
        }
    } else {
        constexpr double eps = 1e-8;
        std::vector<double> neg_mean(d), inv_std(d);
        for (std::size_t j = 0; j < d; ++j) {
            neg_mean[j] = -bn.running_mean[j];
            inv_std[j] = 1.0 / std::sqrt(bn.running_var[j] + eps);
        }
        Tensor centered = add(x, Tensor::leaf(Shape{1, d}, std::move(neg_mean)));
        normalized = mul(centered, Tensor::leaf(Shape{1, d}, std::move(inv_std)));
    }
    return add(mul(normalized, bn.gamma), bn.beta);
}

void collect_params(BatchNormLayer& bn, std::vector<Tensor*>& out) {
    out.push_back(&bn.gamma);
    out.push_back(&bn.beta);
}

EncoderParams make_encoder(std::size_t in_dim, std::size_t hidden_dim, std::size_t out_dim,
                           ParamStream& ps) {
    EncoderParams enc;
    enc.l1 = make_linear(in_dim, hidden_dim, ps);
    enc.l2 = make_linear(hidden_dim, hidden_dim, ps);
    enc.l3 = make_linear(hidden_dim, out_dim, ps);
    return enc;
}

Tensor encoder_forward(const EncoderParams& enc, const Tensor& x) {
    Tensor h1 = leaky_relu(linear_forward(enc.l1, x), enc.negative_slope);
    Tensor h2 = leaky_relu(linear_forward(enc.l2, h1), enc.negative_slope);
    return linear_forward(enc.l3, h2);
}

FeatureMatrix encoder_forward_nograd(const EncoderParams& enc, const FeatureMatrix& x) {
    NoGradGuard guard;
    return encoder_forward(enc, Tensor::from_matrix(x)).to_matrix();
}

std::vector<Tensor*> encoder_params(EncoderParams& enc) {
    std::vector<Tensor*> out;
    collect_params(enc.l1, out);
    collect_params(enc.l2, out);
    collect_params(enc.l3, out);
    return out;
}

EncoderParams clone_frozen(const EncoderParams& enc) {
    EncoderParams copy;
    copy.negative_slope = enc.negative_slope;
    copy.l1 = {enc.l1.weight.clone(false), enc.l1.bias.clone(false)};
    copy.l2 = {enc.l2.weight.clone(false), enc.l2.bias.clone(false)};
    copy.l3 = {enc.l3.weight.clone(false), enc.l3.bias.clone(false)};
    return copy;
}

std::size_t encoder_value_count(const EncoderParams& enc) {
    return enc.l1.weight.numel() + enc.l1.bias.numel() + enc.l2.weight.numel() +
           enc.l2.bias.numel() + enc.l3.weight.numel() + enc.l3.bias.numel();
}

std::size_t encoder_input_dim(const EncoderParams& enc) { return enc.l1.weight.rows(); }
std::size_t encoder_output_dim(const EncoderParams& enc) { return enc.l3.weight.cols(); }

DiscriminatorParams make_discriminator(std::size_t d, ParamStream& ps) {
    if (d < 4) throw ConfigError("discriminator: feature dim must be at least 4");
    DiscriminatorParams disc;
    disc.l1 = make_linear(d, d / 2, ps);
    disc.l2 = make_linear(d / 2, d / 4, ps);
    disc.l3 = make_linear(d / 4, 1, ps);
    return disc;
}

Tensor discriminator_forward(const DiscriminatorParams& disc, const Tensor& f) {
    Tensor h1 = leaky_relu(linear_forward(disc.l1, f), disc.negative_slope);
    Tensor h2 = leaky_relu(linear_forward(disc.l2, h1), disc.negative_slope);
    return sigmoid(linear_forward(disc.l3, h2));
}

std::vector<Tensor*> discriminator_params(DiscriminatorParams& disc) {
    std::vector<Tensor*> out;
    collect_params(disc.l1, out);
    collect_params(disc.l2, out);
    collect_params(disc.l3, out);
    return out;
}

namespace {

GateBranch make_gate_branch(std::size_t d, std::size_t bottleneck, ParamStream& ps) {
    GateBranch b;
    b.down = make_linear(d, bottleneck, ps);
    b.bn_mid = make_batchnorm(bottleneck);
    b.up = make_linear(bottleneck, d, ps);
    b.bn_out = make_batchnorm(d);
    return b;
}

Tensor gate_branch_forward(GateBranch& b, const Tensor& x, BnMode mode) {
    Tensor mid = sigmoid(batchnorm_forward(b.bn_mid, linear_forward(b.down, x), mode));
    return batchnorm_forward(b.bn_out, linear_forward(b.up, mid), mode);
}

}  // namespace

GateParams make_gate(std::size_t d, std::size_t bottleneck_ratio, ParamStream& ps) {
    if (bottleneck_ratio == 0 || d / bottleneck_ratio == 0)
        throw ConfigError("gate: bottleneck ratio too large for feature dim");
    GateParams g;
    g.t1 = make_gate_branch(d, d / bottleneck_ratio, ps);
    g.t2 = make_gate_branch(d, d / bottleneck_ratio, ps);
    return g;
}

Tensor gate_forward(GateParams& gate, const Tensor& x, BnMode mode) {
    Tensor b1 = gate_branch_forward(gate.t1, x, mode);
    Tensor b2 = gate_branch_forward(gate.t2, x, mode);
    return sigmoid(add(b1, b2));
}

std::vector<Tensor*> gate_params(GateParams& gate) {
    std::vector<Tensor*> out;
    for (GateBranch* b : {&gate.t1, &gate.t2}) {
        collect_params(b->down, out);
        collect_params(b->bn_mid, out);
        collect_params(b->up, out);
        collect_params(b->bn_out, out);
    }
    return out;
}

ClassifierParams make_classifier(std::size_t d, std::size_t num_classes, ParamStream& ps) {
    return ClassifierParams{make_linear(d, num_classes, ps)};
}

Tensor classifier_forward(const ClassifierParams& c, const Tensor& f) {
    return linear_forward(c.out, f);
}

std::vector<Tensor*> classifier_params(ClassifierParams& c) {
    std::vector<Tensor*> out;
    collect_params(c.out, out);
    return out;
}

}  // namespace fedafd::nets
