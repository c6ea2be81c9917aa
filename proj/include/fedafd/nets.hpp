#pragma once

#include <cstddef>
#include <vector>

#include "fedafd/common.hpp"
#include "fedafd/tensor.hpp"

namespace fedafd::nets {

/// Derives one fresh rng stream per parameter tensor from the master seed
/// and a per-network scope, so component inits never interleave.
struct ParamStream {
    std::uint64_t master = 0;
    std::uint64_t scope = 0;
    std::uint64_t counter = 0;
    Rng next();
};

struct LinearLayer {
    Tensor weight;  // [in x out]
    Tensor bias;    // [1 x out]
};

LinearLayer make_linear(std::size_t in_dim, std::size_t out_dim, ParamStream& ps);
Tensor linear_forward(const LinearLayer& l, const Tensor& x);
void collect_params(LinearLayer& l, std::vector<Tensor*>& out);

enum class BnMode { train, eval };

/// Batch normalization with learnable affine and running statistics
/// (momentum 0.1). Training mode normalizes by batch statistics and updates
/// the running buffers; eval mode normalizes by the running buffers.
struct BatchNormLayer {
    Tensor gamma;  // [1 x d]
    Tensor beta;   // [1 x d]
    std::vector<double> running_mean;
    std::vector<double> running_var;
    double momentum = 0.1;
};

BatchNormLayer make_batchnorm(std::size_t d);
Tensor batchnorm_forward(BatchNormLayer& bn, const Tensor& x, BnMode mode);
void collect_params(BatchNormLayer& bn, std::vector<Tensor*>& out);

/// Two-hidden-layer perceptron, LeakyReLU(0.2) after the hidden layers,
/// linear output of width out_dim.
struct EncoderParams {
    LinearLayer l1, l2, l3;
    double negative_slope = 0.2;
};

EncoderParams make_encoder(std::size_t in_dim, std::size_t hidden_dim, std::size_t out_dim,
                           ParamStream& ps);
Tensor encoder_forward(const EncoderParams& enc, const Tensor& x);
FeatureMatrix encoder_forward_nograd(const EncoderParams& enc, const FeatureMatrix& x);
std::vector<Tensor*> encoder_params(EncoderParams& enc);
/// Deep copy with gradients disabled, for frozen broadcast snapshots.
EncoderParams clone_frozen(const EncoderParams& enc);
std::size_t encoder_value_count(const EncoderParams& enc);
std::size_t encoder_input_dim(const EncoderParams& enc);
std::size_t encoder_output_dim(const EncoderParams& enc);

/// Binary domain discriminator d -> d/2 -> d/4 -> 1 with LeakyReLU(0.2)
/// between layers and a sigmoid output, read as the probability that the
/// input feature comes from the global distribution.
struct DiscriminatorParams {
    LinearLayer l1, l2, l3;
    double negative_slope = 0.2;
};

DiscriminatorParams make_discriminator(std::size_t d, ParamStream& ps);
Tensor discriminator_forward(const DiscriminatorParams& disc, const Tensor& f);
std::vector<Tensor*> discriminator_params(DiscriminatorParams& disc);

/// One bottleneck branch of the fusion gate:
/// linear d -> d/r, batch norm, sigmoid, linear d/r -> d, batch norm.
struct GateBranch {
    LinearLayer down, up;
    BatchNormLayer bn_mid, bn_out;
};

/// Attention gate M(x) = sigmoid(T1(x) + T2(x)), two independent branches.
struct GateParams {
    GateBranch t1, t2;
};

GateParams make_gate(std::size_t d, std::size_t bottleneck_ratio, ParamStream& ps);
Tensor gate_forward(GateParams& gate, const Tensor& x, BnMode mode);
std::vector<Tensor*> gate_params(GateParams& gate);

struct ClassifierParams {
    LinearLayer out;
};

ClassifierParams make_classifier(std::size_t d, std::size_t num_classes, ParamStream& ps);
Tensor classifier_forward(const ClassifierParams& c, const Tensor& f);
std::vector<Tensor*> classifier_params(ClassifierParams& c);

}  // namespace fedafd::nets
