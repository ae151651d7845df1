#pragma once

#include <map>
#include <string>
#include <vector>

#include "vstain/rng.hpp"
#include "vstain/tensor.hpp"

namespace vstain::nn {

using ad::NodePtr;

/// Named trainable parameters. Leaf nodes persist across forward passes;
/// gradients accumulate in the leaves until zero_grad().
struct Params {
    std::map<std::string, NodePtr> named;

    NodePtr add(const std::string& name, Tensor init);
    NodePtr get(const std::string& name) const;
    std::int64_t count() const;
    void zero_grad();
    void set_trainable(bool on);
    bool all_finite() const;
    /// FNV-1a over the raw little-endian float bytes of every parameter,
    /// in name order. Used by determinism tests.
    std::uint64_t checksum() const;
    Params clone() const;
};

// He-normal initializers (std = sqrt(2 / fan_in)).
Tensor init_conv(int out_ch, int in_ch, int k, Rng& rng);
Tensor init_linear(int out_f, int in_f, Rng& rng);

struct Conv2d {
    NodePtr w, b;
    int stride = 1, pad = 1;
    NodePtr operator()(NodePtr x) const { return ad::conv2d(x, w, b, stride, pad); }
};

Conv2d make_conv(Params& p, const std::string& name, int in_ch, int out_ch, int k, int stride,
                 int pad, Rng& rng, bool zero_init = false);

struct Linear {
    NodePtr w, b;  // w: (in, out), b: (1, out)
    NodePtr operator()(NodePtr x) const;  // x: (rows, in) -> (rows, out)
};

Linear make_linear(Params& p, const std::string& name, int in_f, int out_f, Rng& rng,
                   bool zero_init = false);

/// Group normalization with learned per-channel scale/shift, group size 4.
struct GroupNorm {
    NodePtr gamma, beta;  // (1, C, 1, 1)
    int groups = 1;
    NodePtr operator()(NodePtr x) const;
};

GroupNorm make_group_norm(Params& p, const std::string& name, int channels);

/// Sinusoidal features of integer timesteps: (N,) -> (N, dim). Constant
/// (non-trainable) node.
NodePtr timestep_embedding(const std::vector<int>& ts, int dim);

/// AdamW with decoupled weight decay. State keyed by parameter name, so it
/// survives checkpointing by name.
struct AdamW {
    float lr = 1e-4f;
    float beta1 = 0.9f, beta2 = 0.999f, eps = 1e-8f;
    float weight_decay = 0.0f;
    int t = 0;
    std::map<std::string, std::pair<Tensor, Tensor>> state;  // m, v

    void step(Params& params);
};

/// Plain SGD step (used by test-time refinement, where a first-order descent
/// guarantee matters more than adaptivity).
void sgd_step(Params& params, float lr);

}  // namespace vstain::nn
