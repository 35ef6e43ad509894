#include "dmsk/tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "dmsk/errors.hpp"
#include "dmsk/kernels.hpp"

namespace dmsk {

TokenGrid TokenGrid::empty(int length, int layers) {
    TokenGrid g;
    g.length = length;
    g.layers = layers;
    g.indices.assign(static_cast<size_t>(layers) * length, 0);
    g.mask.assign(length, 0);
    return g;
}

Conv1dLayer Conv1dLayer::init(int in_ch, int out_ch, int kernel, int stride, int pad,
                              Rng& rng) {
    Conv1dLayer l;
    l.kernel = kernel;
    l.stride = stride;
    l.pad = pad;
    const float scale = std::sqrt(2.0f / static_cast<float>(in_ch * kernel));
    l.w = Tensor::randn({out_ch, in_ch * kernel}, rng, scale, true);
    l.b = Tensor::zeros({out_ch}, true);
    return l;
}

QuantizeResult quantize(const Tensor& latents, const std::vector<Tensor>& codebooks) {
    if (codebooks.empty()) throw DataError("quantize: no codebooks");
    for (const Tensor& cb : codebooks)
        if (cb.rows() == 0) throw DataError("quantize: empty codebook");
    const int n = latents.rows();
    const int d = latents.cols();
    const int Q = static_cast<int>(codebooks.size());

    QuantizeResult out;
    out.grid = TokenGrid::empty(n, Q);
    out.quantized = Tensor::zeros({n, d});
    out.residual_norms.resize(Q);

    std::vector<float> residual(*latents.data);
    std::vector<int> idx(n);
    for (int q = 0; q < Q; ++q) {
        const Tensor& cb = codebooks[q];
        if (cb.cols() != d) throw DimensionError("quantize: codebook width mismatch");
        kernels::nearest_code(residual.data(), cb.ptr(), n, cb.rows(), d, idx.data(),
                              nullptr);
        double norm_acc = 0.0;
        for (int i = 0; i < n; ++i) {
            out.grid.idx(q, i) = idx[i];
            const float* code = cb.ptr() + static_cast<size_t>(idx[i]) * d;
            double sq = 0.0;
            for (int j = 0; j < d; ++j) {
                const size_t at = static_cast<size_t>(i) * d + j;
                residual[at] -= code[j];
                (*out.quantized.data)[at] += code[j];
                sq += static_cast<double>(residual[at]) * residual[at];
            }
            norm_acc += std::sqrt(sq);
        }
        out.residual_norms[q] = static_cast<float>(norm_acc / n);
    }
    return out;
}

Tensor tokenizer_loss(const Tensor& m, const Tensor& m_hat, const Tensor& z,
                      const Tensor& z_bar, float beta) {
    using namespace ops;
    Tensor recon = l1(m, m_hat);
    Tensor codebook_term = mse(z.detached(), z_bar);
    Tensor commit_term = mse(z, z_bar.detached());
    return add(recon, add(codebook_term, scale(commit_term, beta)));
}

TokenizerModel TokenizerModel::init(const Config& cfg, int feature_dim, Rng& rng) {
    TokenizerModel t;
    t.feature_dim = feature_dim;
    t.codebook_size = cfg.i("tokenizer.codebook");
    t.code_dim = cfg.i("tokenizer.code_dim");
    t.quant_layers = cfg.i("tokenizer.quant_layers");
    t.downsample = cfg.i("tokenizer.downsample");
    t.hidden = cfg.i("tokenizer.hidden");
    t.fps = cfg.i("corpus.fps");
    const int h = t.hidden;
    t.enc1 = Conv1dLayer::init(feature_dim, h, 4, 2, 1, rng);
    t.enc2 = Conv1dLayer::init(h, h, 4, 2, 1, rng);
    t.enc3 = Conv1dLayer::init(h, t.code_dim, 3, 1, 1, rng);
    t.dec1 = Conv1dLayer::init(t.code_dim, h, 3, 1, 1, rng);
    t.dec2 = Conv1dLayer::init(h, h, 3, 1, 1, rng);
    t.dec3 = Conv1dLayer::init(h, h, 3, 1, 1, rng);
    t.dec4 = Conv1dLayer::init(h, feature_dim, 3, 1, 1, rng);
    for (int q = 0; q < t.quant_layers; ++q) {
        const float spread = q == 0 ? 0.5f : 0.05f;
        t.codebooks.push_back(
            Tensor::randn({t.codebook_size, t.code_dim}, rng, spread, true));
        t.usage.emplace_back(t.codebook_size, 0);
    }
    return t;
}

Tensor TokenizerModel::encode_latents(const Tensor& features) const {
    using namespace ops;
    Tensor x = relu(enc1.forward(features));
    x = relu(enc2.forward(x));
    return enc3.forward(x);
}

Tensor TokenizerModel::decode_latents(const Tensor& latents) const {
    using namespace ops;
    Tensor x = relu(dec1.forward(latents));
    x = upsample_rows(x, 2);
    x = relu(dec2.forward(x));
    x = upsample_rows(x, 2);
    x = relu(dec3.forward(x));
    return dec4.forward(x);
}

TokenGrid TokenizerModel::encode(const MotionSequence& seq) const {
    if (seq.empty()) throw DataError("encode: empty sequence");
    if (seq.dim != feature_dim) throw DimensionError("encode: feature width mismatch");
    if (!trained) std::fprintf(stderr, "warning: encoding with an untrained tokenizer\n");
    MotionSequence padded = seq;
    while (padded.frames % downsample != 0) {
        padded.features.insert(padded.features.end(),
                               padded.features.end() - padded.dim, padded.features.end());
        ++padded.frames;
    }
    const Tensor features = motion_to_tensor(padded);
    const Tensor z = encode_latents(features);
    QuantizeResult qr = quantize(z, codebooks);
    return std::move(qr.grid);
}

Tensor TokenizerModel::grid_codes(const TokenGrid& grid) const {
    if (grid.layers > static_cast<int>(codebooks.size()))
        throw DimensionError("grid_codes: more grid layers than codebooks");
    Tensor sum = Tensor::zeros({grid.length, code_dim});
    for (int q = 0; q < grid.layers; ++q) {
        const Tensor& cb = codebooks[q];
        for (int i = 0; i < grid.length; ++i) {
            const int id = grid.idx(q, i);
            if (id < 0 || id >= cb.rows()) throw DataError("grid_codes: index out of range");
            const float* code = cb.ptr() + static_cast<size_t>(id) * code_dim;
            for (int j = 0; j < code_dim; ++j)
                (*sum.data)[static_cast<size_t>(i) * code_dim + j] += code[j];
        }
    }
    return sum;
}

MotionSequence TokenizerModel::decode(const TokenGrid& grid, int out_frames) const {
    if (!trained) std::fprintf(stderr, "warning: decoding with an untrained tokenizer\n");
    const Tensor latents = grid_codes(grid);
    const Tensor out = decode_latents(latents);
    MotionSequence seq = tensor_to_motion(out, fps);
    if (out_frames > 0 && out_frames < seq.frames) {
        seq.features.resize(static_cast<size_t>(out_frames) * seq.dim);
        seq.frames = out_frames;
    }
    // foot-contact channels live in [0,1]
    for (int t = 0; t < seq.frames; ++t)
        for (int d = seq.dim - 2; d < seq.dim; ++d)
            seq.at(t, d) = std::clamp(seq.at(t, d), 0.0f, 1.0f);
    return seq;
}

void TokenizerModel::count_usage(const TokenGrid& grid) {
    for (int q = 0; q < grid.layers && q < static_cast<int>(usage.size()); ++q)
        for (int i = 0; i < grid.length; ++i) ++usage[q][grid.idx(q, i)];
}

int TokenizerModel::codebook_reset(const Tensor& batch_latents, Rng& rng) {
    int replaced = 0;
    const int n = batch_latents.rows();
    if (n == 0) return 0;
    for (size_t q = 0; q < codebooks.size(); ++q) {
        Tensor& cb = codebooks[q];
        for (int l = 0; l < cb.rows(); ++l) {
            if (usage[q][l] != 0) continue;
            const int pick = rng.uniform_int(n);
            for (int j = 0; j < code_dim; ++j)
                (*cb.data)[static_cast<size_t>(l) * code_dim + j] =
                    batch_latents.at(pick, j) + 0.01f * rng.normal();
            ++replaced;
        }
        std::fill(usage[q].begin(), usage[q].end(), 0);
    }
    return replaced;
}

std::vector<Tensor> TokenizerModel::params() {
    std::vector<Tensor> p;
    for (Conv1dLayer* l : {&enc1, &enc2, &enc3, &dec1, &dec2, &dec3, &dec4}) {
        p.push_back(l->w);
        p.push_back(l->b);
    }
    for (Tensor& cb : codebooks) p.push_back(cb);
    return p;
}

void TokenizerModel::to_section(CheckpointSection& sec) const {
    sec.put_values("meta",
                   {static_cast<float>(feature_dim), static_cast<float>(codebook_size),
                    static_cast<float>(code_dim), static_cast<float>(quant_layers),
                    static_cast<float>(downsample), static_cast<float>(hidden),
                    static_cast<float>(fps), trained ? 1.0f : 0.0f});
    const Conv1dLayer* layers[] = {&enc1, &enc2, &enc3, &dec1, &dec2, &dec3, &dec4};
    const char* names[] = {"enc1", "enc2", "enc3", "dec1", "dec2", "dec3", "dec4"};
    for (int i = 0; i < 7; ++i) {
        sec.put(std::string(names[i]) + ".w", layers[i]->w);
        sec.put(std::string(names[i]) + ".b", layers[i]->b);
        sec.put_values(std::string(names[i]) + ".geom",
                       {static_cast<float>(layers[i]->kernel),
                        static_cast<float>(layers[i]->stride),
                        static_cast<float>(layers[i]->pad)});
    }
    for (size_t q = 0; q < codebooks.size(); ++q)
        sec.put("codebook" + std::to_string(q), codebooks[q]);
}

TokenizerModel TokenizerModel::from_section(const CheckpointSection& sec) {
    TokenizerModel t;
    const TensorRecord* meta = sec.find("meta");
    if (!meta || meta->data.size() < 8)
        throw CheckpointError("tokenizer section: bad meta");
    t.feature_dim = static_cast<int>(meta->data[0]);
    t.codebook_size = static_cast<int>(meta->data[1]);
    t.code_dim = static_cast<int>(meta->data[2]);
    t.quant_layers = static_cast<int>(meta->data[3]);
    t.downsample = static_cast<int>(meta->data[4]);
    t.hidden = static_cast<int>(meta->data[5]);
    t.fps = static_cast<int>(meta->data[6]);
    t.trained = meta->data[7] != 0.0f;
    Conv1dLayer* layers[] = {&t.enc1, &t.enc2, &t.enc3, &t.dec1, &t.dec2, &t.dec3, &t.dec4};
    const char* names[] = {"enc1", "enc2", "enc3", "dec1", "dec2", "dec3", "dec4"};
    for (int i = 0; i < 7; ++i) {
        layers[i]->w = sec.get(std::string(names[i]) + ".w", true);
        layers[i]->b = sec.get(std::string(names[i]) + ".b", true);
        const TensorRecord* geom = sec.find(std::string(names[i]) + ".geom");
        if (!geom || geom->data.size() < 3)
            throw CheckpointError("tokenizer section: bad conv geometry");
        layers[i]->kernel = static_cast<int>(geom->data[0]);
        layers[i]->stride = static_cast<int>(geom->data[1]);
        layers[i]->pad = static_cast<int>(geom->data[2]);
    }
    for (int q = 0; q < t.quant_layers; ++q) {
        t.codebooks.push_back(sec.get("codebook" + std::to_string(q), true));
        t.usage.emplace_back(t.codebook_size, 0);
    }
    return t;
}

Tensor motion_to_tensor(const MotionSequence& seq) {
    return Tensor::from({seq.frames, seq.dim}, seq.features);
}

MotionSequence tensor_to_motion(const Tensor& t, int fps) {
    MotionSequence seq;
    seq.fps = fps;
    seq.frames = t.rows();
    seq.dim = t.cols();
    seq.features = *t.data;
    return seq;
}

}  // namespace dmsk
