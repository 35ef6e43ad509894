#include "dmsk/backbone.hpp"

#include <algorithm>
#include <cmath>

#include "dmsk/errors.hpp"

namespace dmsk {

using namespace ops;

LinearLayer LinearLayer::init(int in_dim, int out_dim, Rng& rng, float scale) {
    LinearLayer l;
    l.w = Tensor::randn({in_dim, out_dim}, rng, scale, true);
    l.b = Tensor::zeros({out_dim}, true);
    return l;
}

LinearLayer LinearLayer::zero_init(int in_dim, int out_dim) {
    LinearLayer l;
    l.w = Tensor::zeros({in_dim, out_dim}, true);
    l.b = Tensor::zeros({out_dim}, true);
    return l;
}

TransformerBlock TransformerBlock::init(int width, int heads, int ffn, Rng& rng) {
    TransformerBlock b;
    b.heads = heads;
    b.ln1_g = Tensor::full({width}, 1.0f);
    b.ln1_g.set_requires_grad();
    b.ln1_b = Tensor::zeros({width}, true);
    b.ln2_g = Tensor::full({width}, 1.0f);
    b.ln2_g.set_requires_grad();
    b.ln2_b = Tensor::zeros({width}, true);
    b.wq = LinearLayer::init(width, width, rng);
    b.wk = LinearLayer::init(width, width, rng);
    b.wv = LinearLayer::init(width, width, rng);
    b.wo = LinearLayer::init(width, width, rng);
    b.ff1 = LinearLayer::init(width, ffn, rng);
    b.ff2 = LinearLayer::init(ffn, width, rng);
    return b;
}

Tensor TransformerBlock::forward(const Tensor& x, const Tensor* attn_bias) const {
    const int width = x.cols();
    const int head_dim = width / heads;
    const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(head_dim));

    Tensor h = layer_norm(x, ln1_g, ln1_b);
    Tensor q = wq.forward(h);
    Tensor k = wk.forward(h);
    Tensor v = wv.forward(h);

    std::vector<Tensor> ctx_heads;
    ctx_heads.reserve(heads);
    for (int hd = 0; hd < heads; ++hd) {
        const int c0 = hd * head_dim, c1 = (hd + 1) * head_dim;
        Tensor qh = slice_cols(q, c0, c1);
        Tensor kh = slice_cols(k, c0, c1);
        Tensor vh = slice_cols(v, c0, c1);
        Tensor scores = scale(matmul_nt(qh, kh), inv_sqrt);
        if (attn_bias) scores = add(scores, *attn_bias);
        Tensor probs = softmax(scores, 1);
        ctx_heads.push_back(matmul(probs, vh));
    }
    Tensor attn = wo.forward(concat_cols(ctx_heads));
    Tensor y = add(x, attn);

    Tensor f = layer_norm(y, ln2_g, ln2_b);
    Tensor ff = ff2.forward(gelu(ff1.forward(f)));
    return add(y, ff);
}

void TransformerBlock::collect_params(std::vector<Tensor>& out) {
    for (Tensor* t : {&ln1_g, &ln1_b, &ln2_g, &ln2_b}) out.push_back(*t);
    for (LinearLayer* l : {&wq, &wk, &wv, &wo, &ff1, &ff2}) {
        out.push_back(l->w);
        out.push_back(l->b);
    }
}

MaskedTransformer MaskedTransformer::init(int codebook_size, int genre_count, int width,
                                          int layers, int heads, int ffn, int max_tokens,
                                          Rng& rng) {
    MaskedTransformer m;
    m.codebook_size = codebook_size;
    m.width = width;
    m.layers = layers;
    m.heads = heads;
    m.ffn = ffn;
    m.max_tokens = max_tokens;
    m.genre_count = genre_count;
    m.token_emb = Tensor::randn({codebook_size + 2, width}, rng, 0.02f, true);
    m.genre_emb = Tensor::randn({genre_count + 1, width}, rng, 0.02f, true);
    m.pos_emb = Tensor::randn({max_tokens, width}, rng, 0.02f, true);
    for (int i = 0; i < layers; ++i)
        m.blocks.push_back(TransformerBlock::init(width, heads, ffn, rng));
    m.head_ln_g = Tensor::full({width}, 1.0f);
    m.head_ln_g.set_requires_grad();
    m.head_ln_b = Tensor::zeros({width}, true);
    m.head = LinearLayer::init(width, codebook_size, rng);
    return m;
}

Tensor MaskedTransformer::embed(const std::vector<int>& tokens, int genre) const {
    const int n = static_cast<int>(tokens.size());
    if (n + 1 > max_tokens) throw DimensionError("sequence exceeds max_tokens");
    const int g = genre < 0 ? null_genre() : genre;
    if (g > genre_count) throw DataError("genre id out of table");
    std::vector<int> ids(tokens);
    for (int id : ids)
        if (id < 0 || id > pad_id()) throw DataError("token id out of range");
    Tensor tok_rows = ops::embedding(token_emb, ids);
    Tensor cond_row = ops::embedding(genre_emb, {g});
    Tensor x = ops::concat_rows({cond_row, tok_rows});
    Tensor pos = ops::embedding(pos_emb, [&] {
        std::vector<int> p(n + 1);
        for (int i = 0; i <= n; ++i) p[i] = i;
        return p;
    }());
    return ops::add(x, pos);
}

Tensor MaskedTransformer::run(const Tensor& x0, const std::vector<int>& tokens,
                              const std::vector<Tensor>* injections) const {
    const int n = static_cast<int>(tokens.size());
    // pad keys are invisible to attention
    Tensor bias;
    bool has_pad = false;
    for (int id : tokens) has_pad = has_pad || id == pad_id();
    if (has_pad) {
        bias = Tensor::zeros({n + 1, n + 1});
        for (int j = 0; j < n; ++j)
            if (tokens[j] == pad_id())
                for (int i = 0; i <= n; ++i) bias.at(i, j + 1) = -1e9f;
    }
    Tensor x = x0;
    for (int i = 0; i < layers; ++i) {
        if (injections && i < static_cast<int>(injections->size()) &&
            (*injections)[i].data)
            x = ops::add(x, (*injections)[i]);
        x = blocks[i].forward(x, has_pad ? &bias : nullptr);
    }
    Tensor token_states = ops::slice_rows(x, 1, n + 1);
    Tensor out = ops::layer_norm(token_states, head_ln_g, head_ln_b);
    return head.forward(out);
}

Tensor MaskedTransformer::forward_logits(const std::vector<int>& tokens, int genre,
                                         const std::vector<Tensor>* injections) const {
    return run(embed(tokens, genre), tokens, injections);
}

Tensor MaskedTransformer::forward_logits_from(const Tensor& token_rows, int genre) const {
    const int n = token_rows.rows();
    if (n + 1 > max_tokens) throw DimensionError("sequence exceeds max_tokens");
    const int g = genre < 0 ? null_genre() : genre;
    if (g > genre_count) throw DataError("genre id out of table");
    Tensor cond_row = ops::embedding(genre_emb, {g});
    Tensor x = ops::concat_rows({cond_row, token_rows});
    Tensor pos = ops::embedding(pos_emb, [&] {
        std::vector<int> p(n + 1);
        for (int i = 0; i <= n; ++i) p[i] = i;
        return p;
    }());
    x = ops::add(x, pos);
    const std::vector<int> no_pads(n, 0);
    return run(x, no_pads, nullptr);
}

std::vector<Tensor> MaskedTransformer::params() {
    std::vector<Tensor> p{token_emb, genre_emb, pos_emb};
    for (TransformerBlock& b : blocks) b.collect_params(p);
    p.push_back(head_ln_g);
    p.push_back(head_ln_b);
    p.push_back(head.w);
    p.push_back(head.b);
    return p;
}

void MaskedTransformer::freeze() {
    auto off = [](Tensor& t) {
        t.requires_grad = false;
        t.grad.reset();
    };
    off(token_emb);
    off(genre_emb);
    off(pos_emb);
    for (TransformerBlock& b : blocks) {
        for (Tensor* t : {&b.ln1_g, &b.ln1_b, &b.ln2_g, &b.ln2_b}) off(*t);
        for (LinearLayer* l : {&b.wq, &b.wk, &b.wv, &b.wo, &b.ff1, &b.ff2}) {
            off(l->w);
            off(l->b);
        }
    }
    off(head_ln_g);
    off(head_ln_b);
    off(head.w);
    off(head.b);
}

MaskedTransformer MaskedTransformer::clone() const {
    MaskedTransformer m = *this;
    auto deep = [](Tensor& t) {
        t = t.clone();
        t.set_requires_grad();
    };
    deep(m.token_emb);
    deep(m.genre_emb);
    deep(m.pos_emb);
    for (TransformerBlock& b : m.blocks) {
        for (Tensor* t : {&b.ln1_g, &b.ln1_b, &b.ln2_g, &b.ln2_b}) deep(*t);
        for (LinearLayer* l : {&b.wq, &b.wk, &b.wv, &b.wo, &b.ff1, &b.ff2}) {
            deep(l->w);
            deep(l->b);
        }
    }
    deep(m.head_ln_g);
    deep(m.head_ln_b);
    deep(m.head.w);
    deep(m.head.b);
    return m;
}

void MaskedTransformer::to_section(CheckpointSection& sec) const {
    sec.put_values("meta", {static_cast<float>(codebook_size), static_cast<float>(width),
                            static_cast<float>(layers), static_cast<float>(heads),
                            static_cast<float>(ffn), static_cast<float>(max_tokens),
                            static_cast<float>(genre_count)});
    sec.put("token_emb", token_emb);
    sec.put("genre_emb", genre_emb);
    sec.put("pos_emb", pos_emb);
    for (int i = 0; i < layers; ++i) {
        const TransformerBlock& b = blocks[i];
        const std::string p = "block" + std::to_string(i) + ".";
        sec.put(p + "ln1_g", b.ln1_g);
        sec.put(p + "ln1_b", b.ln1_b);
        sec.put(p + "ln2_g", b.ln2_g);
        sec.put(p + "ln2_b", b.ln2_b);
        const LinearLayer* ls[] = {&b.wq, &b.wk, &b.wv, &b.wo, &b.ff1, &b.ff2};
        const char* ln[] = {"wq", "wk", "wv", "wo", "ff1", "ff2"};
        for (int j = 0; j < 6; ++j) {
            sec.put(p + ln[j] + ".w", ls[j]->w);
            sec.put(p + ln[j] + ".b", ls[j]->b);
        }
    }
    sec.put("head_ln_g", head_ln_g);
    sec.put("head_ln_b", head_ln_b);
    sec.put("head.w", head.w);
    sec.put("head.b", head.b);
}

MaskedTransformer MaskedTransformer::from_section(const CheckpointSection& sec) {
    const TensorRecord* meta = sec.find("meta");
    if (!meta || meta->data.size() < 7) throw CheckpointError("transformer: bad meta");
    MaskedTransformer m;
    m.codebook_size = static_cast<int>(meta->data[0]);
    m.width = static_cast<int>(meta->data[1]);
    m.layers = static_cast<int>(meta->data[2]);
    m.heads = static_cast<int>(meta->data[3]);
    m.ffn = static_cast<int>(meta->data[4]);
    m.max_tokens = static_cast<int>(meta->data[5]);
    m.genre_count = static_cast<int>(meta->data[6]);
    m.token_emb = sec.get("token_emb", true);
    m.genre_emb = sec.get("genre_emb", true);
    m.pos_emb = sec.get("pos_emb", true);
    for (int i = 0; i < m.layers; ++i) {
        TransformerBlock b;
        b.heads = m.heads;
        const std::string p = "block" + std::to_string(i) + ".";
        b.ln1_g = sec.get(p + "ln1_g", true);
        b.ln1_b = sec.get(p + "ln1_b", true);
        b.ln2_g = sec.get(p + "ln2_g", true);
        b.ln2_b = sec.get(p + "ln2_b", true);
        LinearLayer* ls[] = {&b.wq, &b.wk, &b.wv, &b.wo, &b.ff1, &b.ff2};
        const char* ln[] = {"wq", "wk", "wv", "wo", "ff1", "ff2"};
        for (int j = 0; j < 6; ++j) {
            ls[j]->w = sec.get(p + ln[j] + ".w", true);
            ls[j]->b = sec.get(p + ln[j] + ".b", true);
        }
        m.blocks.push_back(std::move(b));
    }
    m.head_ln_g = sec.get("head_ln_g", true);
    m.head_ln_b = sec.get("head_ln_b", true);
    m.head.w = sec.get("head.w", true);
    m.head.b = sec.get("head.b", true);
    return m;
}

int remask_count(int L, int t, int s_total) {
    if (t >= s_total) return 0;
    const double v = static_cast<double>(L) *
                     std::cos(3.14159265358979323846 * t / (2.0 * s_total));
    return static_cast<int>(std::floor(v));
}

float training_mask_ratio(Rng& rng, float floor_ratio) {
    const float u = rng.uniform();
    const float r = std::cos(1.5707963267948966f * u);
    return std::clamp(r, floor_ratio, 1.0f);
}

MaskOutcome training_mask(const std::vector<int>& tokens, Rng& rng, int mask_id,
                          float floor_ratio) {
    const int n = static_cast<int>(tokens.size());
    if (n < 2) throw DataError("training_mask: sequence too short");
    const float r = training_mask_ratio(rng, floor_ratio);
    int count = static_cast<int>(std::lround(r * n));
    count = std::clamp(count, 1, n);

    std::vector<int> order(n);
    for (int i = 0; i < n; ++i) order[i] = i;
    for (int i = n - 1; i > 0; --i) std::swap(order[i], order[rng.uniform_int(i + 1)]);

    MaskOutcome out;
    out.corrupted = tokens;
    out.masked.assign(n, 0);
    for (int i = 0; i < count; ++i) {
        out.corrupted[order[i]] = mask_id;
        out.masked[order[i]] = 1;
    }
    return out;
}

Tensor t2m_loss(const Tensor& logits, const std::vector<int>& targets,
                const std::vector<uint8_t>& masked, float lambda_unmask,
                const std::vector<uint8_t>* pad) {
    const int n = logits.rows();
    Tensor weights = Tensor::zeros({n});
    for (int i = 0; i < n; ++i) {
        if (pad && (*pad)[i]) continue;
        weights.at(i) = masked[i] ? 1.0f : lambda_unmask;
    }
    return ops::cross_entropy(logits, targets, weights);
}

}  // namespace dmsk
