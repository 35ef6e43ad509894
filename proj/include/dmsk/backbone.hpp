#pragma once

// Genre-conditioned masked motion transformer. The genre condition is
// prepended as a token; adapter towers inject per-layer vectors through
// zero-initialized bridges. [MASK] id = K, [PAD] id = K+1.

#include <optional>
#include <string>
#include <vector>

#include "dmsk/checkpoint.hpp"
#include "dmsk/config.hpp"
#include "dmsk/tensor.hpp"
#include "dmsk/tokenizer.hpp"

namespace dmsk {

struct LinearLayer {
    Tensor w;  // in x out
    Tensor b;  // out

    static LinearLayer init(int in_dim, int out_dim, Rng& rng, float scale = 0.02f);
    static LinearLayer zero_init(int in_dim, int out_dim);
    Tensor forward(const Tensor& x) const { return ops::add_row(ops::matmul(x, w), b); }
};

struct TransformerBlock {
    Tensor ln1_g, ln1_b;
    LinearLayer wq, wk, wv, wo;
    Tensor ln2_g, ln2_b;
    LinearLayer ff1, ff2;
    int heads = 4;

    static TransformerBlock init(int width, int heads, int ffn, Rng& rng);
    // attn_bias: optional T x T additive matrix (e.g. -1e9 on pad keys)
    Tensor forward(const Tensor& x, const Tensor* attn_bias) const;
    void collect_params(std::vector<Tensor>& out);
};

struct MaskedTransformer {
    int codebook_size = 128;  // K
    int width = 128;
    int layers = 4;
    int heads = 4;
    int ffn = 512;
    int max_tokens = 257;
    int genre_count = 6;

    Tensor token_emb;  // (K+2) x width
    Tensor genre_emb;  // (G+1) x width; row G is the learned null condition
    Tensor pos_emb;    // max_tokens x width
    std::vector<TransformerBlock> blocks;
    Tensor head_ln_g, head_ln_b;
    LinearLayer head;  // width -> K

    int mask_id() const { return codebook_size; }
    int pad_id() const { return codebook_size + 1; }
    int null_genre() const { return genre_count; }

    static MaskedTransformer init(int codebook_size, int genre_count, int width,
                                  int layers, int heads, int ffn, int max_tokens,
                                  Rng& rng);

    // Token+condition embedding, (n+1) x width; genre < 0 selects the null row.
    Tensor embed(const std::vector<int>& tokens, int genre) const;
    // Logits for every token position (n x K). injections, when present, holds
    // one (n+1) x width tensor per layer added to that layer's input.
    Tensor forward_logits(const std::vector<int>& tokens, int genre,
                          const std::vector<Tensor>* injections = nullptr) const;
    // ITTO entry: replaces the token-embedding rows with a caller-supplied
    // (n x width) tensor, keeping genre/positional handling identical.
    Tensor forward_logits_from(const Tensor& token_rows, int genre) const;

    Tensor run(const Tensor& x0, const std::vector<int>& tokens,
               const std::vector<Tensor>* injections) const;

    std::vector<Tensor> params();
    void freeze();  // drops requires_grad on every parameter
    MaskedTransformer clone() const;
    void to_section(CheckpointSection& sec) const;
    static MaskedTransformer from_section(const CheckpointSection& sec);
};

// floor(L * cos(pi/2 * t / S_total)); 0 at t = S_total.
int remask_count(int L, int t, int s_total);

// cos(pi*u/2) with u ~ U(0,1), clamped to [floor_ratio, 1].
float training_mask_ratio(Rng& rng, float floor_ratio = 0.1f);

struct MaskOutcome {
    std::vector<int> corrupted;    // tokens with [MASK] substituted
    std::vector<uint8_t> masked;   // the set Omega
};
MaskOutcome training_mask(const std::vector<int>& tokens, Rng& rng, int mask_id,
                          float floor_ratio = 0.1f);

// Cross-entropy over all non-pad positions; masked positions weigh 1.0,
// unmasked ones lambda_unmask (0 recovers the masked-only loss).
Tensor t2m_loss(const Tensor& logits, const std::vector<int>& targets,
                const std::vector<uint8_t>& masked, float lambda_unmask,
                const std::vector<uint8_t>* pad = nullptr);

}  // namespace dmsk
