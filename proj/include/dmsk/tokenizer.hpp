#pragma once

// Residual VQ-VAE mapping MotionSequence <-> TokenGrid with temporal
// downsampling (factor 4). Codebooks are trained through the loss terms
// only (no EMA); dead entries are revived by codebook_reset.

#include <cstdint>
#include <string>
#include <vector>

#include "dmsk/checkpoint.hpp"
#include "dmsk/config.hpp"
#include "dmsk/motion.hpp"
#include "dmsk/tensor.hpp"

namespace dmsk {

struct TokenGrid {
    int length = 0;              // n
    int layers = 0;              // Q (base + residual)
    std::vector<int> indices;    // layers x length
    std::vector<uint8_t> mask;   // per-position mask channel

    static TokenGrid empty(int length, int layers);
    int& idx(int layer, int pos) { return indices[static_cast<size_t>(layer) * length + pos]; }
    int idx(int layer, int pos) const {
        return indices[static_cast<size_t>(layer) * length + pos];
    }
    bool masked(int pos) const { return mask[pos] != 0; }
};

struct Conv1dLayer {
    Tensor w;  // out_channels x (in_channels * kernel)
    Tensor b;  // out_channels
    int kernel = 3, stride = 1, pad = 1;

    static Conv1dLayer init(int in_ch, int out_ch, int kernel, int stride, int pad,
                            Rng& rng);
    Tensor forward(const Tensor& x) const { return ops::conv1d(x, w, b, kernel, stride, pad); }
};

struct QuantizeResult {
    TokenGrid grid;
    Tensor quantized;                   // n x d, sum of chosen codes (values only)
    std::vector<float> residual_norms;  // mean remaining L2 error after each layer
};

// Layer 0 picks the nearest code to each latent; each subsequent layer
// quantizes the running residual. Throws on empty codebooks.
QuantizeResult quantize(const Tensor& latents, const std::vector<Tensor>& codebooks);

// ||M - M_hat||_1 + ||sg(z) - z_bar||^2 + beta * ||z - sg(z_bar)||^2,
// every term mean-reduced over its elements.
Tensor tokenizer_loss(const Tensor& m, const Tensor& m_hat, const Tensor& z,
                      const Tensor& z_bar, float beta);

struct TokenizerModel {
    int feature_dim = 41;
    int codebook_size = 128;  // K
    int code_dim = 64;        // d
    int quant_layers = 2;     // Q
    int downsample = 4;
    int hidden = 96;
    int fps = 20;
    bool trained = false;

    Conv1dLayer enc1, enc2, enc3;
    Conv1dLayer dec1, dec2, dec3, dec4;
    std::vector<Tensor> codebooks;            // Q tensors, K x d
    std::vector<std::vector<int64_t>> usage;  // per layer, per entry

    static TokenizerModel init(const Config& cfg, int feature_dim, Rng& rng);

    Tensor encode_latents(const Tensor& features) const;  // N x D -> n x d
    Tensor decode_latents(const Tensor& latents) const;   // n x d -> N x D

    // Right-pads with the last frame to a multiple of the downsample factor.
    TokenGrid encode(const MotionSequence& seq) const;
    // out_frames <= length*downsample trims the decoder output; 0 keeps all.
    MotionSequence decode(const TokenGrid& grid, int out_frames = 0) const;

    // Sum of code embeddings for a grid, as a value-only tensor.
    Tensor grid_codes(const TokenGrid& grid) const;

    void count_usage(const TokenGrid& grid);
    // Re-seeds entries unused since the last reset from random rows of
    // batch_latents. Returns the number of replaced entries.
    int codebook_reset(const Tensor& batch_latents, Rng& rng);

    std::vector<Tensor> params();
    void to_section(CheckpointSection& sec) const;
    static TokenizerModel from_section(const CheckpointSection& sec);
};

Tensor motion_to_tensor(const MotionSequence& seq);
MotionSequence tensor_to_motion(const Tensor& t, int fps);

}  // namespace dmsk
