#include "vlmo/backbone/model.hpp"

#include <cmath>
#include <numeric>

#include "vlmo/errors.hpp"
#include "vlmo/numerics/ops.hpp"
#include "vlmo/util/files.hpp"

namespace vlmo::model {

namespace {

bool ends_with(const std::string& s, std::string_view suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

std::string attn_prefix(std::size_t layer, const char* which) {
    return "layer." + std::to_string(layer) + "." + which;
}

void fill_merge_index(SequenceLayout& layout) {
    layout.merge_index.assign(layout.rows(), 0);
    for (std::size_t i = 0; i < layout.text_rows.size(); ++i) layout.merge_index[layout.text_rows[i]] = i;
    for (std::size_t i = 0; i < layout.image_rows.size(); ++i) {
        layout.merge_index[layout.image_rows[i]] = layout.text_rows.size() + i;
    }
}

// Rebuilds sequence order from per-segment results.
template <typename T>
Tensor<T> merge_segments(const Tensor<T>& text_part, const Tensor<T>& image_part, const SequenceLayout& layout) {
    return gather_rows(concat_rows<T>({text_part, image_part}), std::span<const std::size_t>(layout.merge_index));
}

}  // namespace

Segment SequenceLayout::segment_of(std::size_t row) const {
    if (mode == Modality::image) return Segment::image;
    if (mode == Modality::text) return Segment::text;
    return row % seq < text_length ? Segment::text : Segment::image;
}

SequenceLayout SequenceLayout::image_only(std::size_t batch, std::size_t image_length) {
    SequenceLayout l;
    l.mode = Modality::image;
    l.batch = batch;
    l.seq = l.image_length = image_length;
    l.image_rows.resize(batch * image_length);
    std::iota(l.image_rows.begin(), l.image_rows.end(), 0);
    fill_merge_index(l);
    return l;
}

SequenceLayout SequenceLayout::text_only(std::size_t batch, std::size_t text_length, std::vector<std::uint8_t> valid) {
    SequenceLayout l;
    l.mode = Modality::text;
    l.batch = batch;
    l.seq = l.text_length = text_length;
    l.text_rows.resize(batch * text_length);
    std::iota(l.text_rows.begin(), l.text_rows.end(), 0);
    if (std::find(valid.begin(), valid.end(), 0) != valid.end()) l.key_valid = std::move(valid);
    fill_merge_index(l);
    return l;
}

SequenceLayout SequenceLayout::pair(std::size_t batch, std::size_t text_length, std::size_t image_length,
                                    std::vector<std::uint8_t> text_valid) {
    SequenceLayout l;
    l.mode = Modality::pair;
    l.batch = batch;
    l.text_length = text_length;
    l.image_length = image_length;
    l.seq = text_length + image_length;
    const bool padded = std::find(text_valid.begin(), text_valid.end(), 0) != text_valid.end();
    if (padded) l.key_valid.assign(l.rows(), 1);
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t t = 0; t < text_length; ++t) {
            l.text_rows.push_back(b * l.seq + t);
            if (padded) l.key_valid[b * l.seq + t] = text_valid[b * text_length + t];
        }
        for (std::size_t i = 0; i < image_length; ++i) l.image_rows.push_back(b * l.seq + text_length + i);
    }
    fill_merge_index(l);
    return l;
}

std::string expert_prefix(std::size_t layer, ExpertKind kind) {
    const char* name = "ffn";
    switch (kind) {
        case ExpertKind::vision: name = "ffn_v"; break;
        case ExpertKind::language: name = "ffn_l"; break;
        case ExpertKind::vision_language: name = "ffn_vl"; break;
        case ExpertKind::shared: name = "ffn"; break;
    }
    return "layer." + std::to_string(layer) + "." + name;
}

std::vector<std::pair<std::string, Shape>> parameter_manifest(const ModelConfig& c) {
    c.validate();
    const std::size_t d = c.hidden, n = c.num_patches(), pd = c.patch_dim();
    std::vector<std::pair<std::string, Shape>> m;
    auto ln = [&](const std::string& p) {
        m.push_back({p + ".ln.gamma", {d}});
        m.push_back({p + ".ln.beta", {d}});
    };
    m.push_back({"image.patch_proj.weight", {pd, d}});
    m.push_back({"image.patch_proj.bias", {d}});
    m.push_back({"image.cls", {1, d}});
    m.push_back({"image.mask", {1, d}});
    m.push_back({"image.pos", {n + 1, d}});
    m.push_back({"image.type", {1, d}});
    m.push_back({"text.word", {c.vocab, d}});
    m.push_back({"text.pos", {c.max_text_length, d}});
    m.push_back({"text.type", {1, d}});
    for (std::size_t l = 1; l <= c.layers; ++l) {
        std::vector<std::string> attn;
        if (c.separate_attention_at(l)) {
            attn = {attn_prefix(l, "attn_v"), attn_prefix(l, "attn_l")};
        } else {
            attn = {attn_prefix(l, "attn")};
        }
        for (const auto& p : attn) {
            ln(p);
            m.push_back({p + ".qkv.weight", {d, 3 * d}});
            m.push_back({p + ".qkv.bias", {3 * d}});
            m.push_back({p + ".out.weight", {d, d}});
            m.push_back({p + ".out.bias", {d}});
        }
        std::vector<ExpertKind> experts;
        if (c.experts == ExpertMode::standard) {
            experts = {ExpertKind::shared};
        } else {
            experts = {ExpertKind::vision, ExpertKind::language};
            if (c.experts == ExpertMode::mome && l > c.layers - c.vl_layers) {
                experts.push_back(ExpertKind::vision_language);
            }
        }
        for (auto kind : experts) {
            const auto p = expert_prefix(l, kind);
            ln(p);
            m.push_back({p + ".fc1.weight", {d, c.ffn}});
            m.push_back({p + ".fc1.bias", {c.ffn}});
            m.push_back({p + ".fc2.weight", {c.ffn, d}});
            m.push_back({p + ".fc2.bias", {d}});
        }
    }
    m.push_back({"head.itc_image.weight", {d, c.itc_dim}});
    m.push_back({"head.itc_text.weight", {d, c.itc_dim}});
    m.push_back({"itc.log_temperature", {1}});
    for (auto [head, out] : {std::pair<const char*, std::size_t>{"head.mlm", c.vocab}, {"head.mim", pd}, {"head.itm", 2}}) {
        ln(head);
        m.push_back({std::string(head) + ".weight", {d, out}});
        m.push_back({std::string(head) + ".bias", {out}});
    }
    return m;
}

template <typename T>
Model<T>::Model(const ModelConfig& config, std::uint64_t seed) : config_(config) {
    const auto manifest = parameter_manifest(config_);
    for (std::size_t i = 0; i < manifest.size(); ++i) {
        const auto& [name, shape] = manifest[i];
        Tensor<T> value;
        if (name == "itc.log_temperature") {
            value = Tensor<T>::full(shape, T(std::log(0.07)));
        } else if (ends_with(name, ".gamma")) {
            value = Tensor<T>::full(shape, T(1));
        } else if (ends_with(name, ".bias") || ends_with(name, ".beta")) {
            value = Tensor<T>::zeros(shape);
        } else {
            value = truncated_normal<T>(shape, 0.02, util::mix_seed(seed, i));
        }
        params_.add(name, std::move(value));
    }
}

template <typename T>
Model<T>::Model(const ModelConfig& config, ParameterStore<T> params) : config_(config), params_(std::move(params)) {
    for (const auto& [name, shape] : parameter_manifest(config_)) {
        if (!params_.contains(name)) throw DataError("parameter '" + name + "' missing for this model config");
        if (params_.get(name).shape() != shape) {
            throw DataError("parameter '" + name + "' has shape " + shape_str(params_.get(name).shape()) +
                            ", config requires " + shape_str(shape));
        }
    }
}

template <typename T>
Tensor<T> Model<T>::embed_image(const ImageBatch& images) const {
    const std::size_t n = config_.num_patches(), pd = config_.patch_dim(), b = images.batch;
    if (b == 0 || images.patches.size() != b * n * pd) {
        throw DimensionError("embed_image: expected " + std::to_string(b) + " x " + std::to_string(n) + " patches of " +
                             std::to_string(pd) + " values, got " + std::to_string(images.patches.size()) + " values");
    }
    if (!images.masked.empty() && images.masked.size() != b * n) {
        throw DimensionError("embed_image: patch mask has " + std::to_string(images.masked.size()) + " flags");
    }
    auto raw = Tensor<T>::from({b * n, pd}, std::vector<T>(images.patches.begin(), images.patches.end()));
    auto projected = linear(raw, param("image.patch_proj.weight"), param("image.patch_proj.bias"));
    const bool any_masked = std::find(images.masked.begin(), images.masked.end(), 1) != images.masked.end();
    // Table rows: [I_CLS, (mask), projected patches...].
    std::vector<Tensor<T>> table{param("image.cls")};
    if (any_masked) table.push_back(param("image.mask"));
    const std::size_t first_patch = table.size();
    table.push_back(projected);
    std::vector<std::size_t> index;
    index.reserve(b * (n + 1));
    for (std::size_t e = 0; e < b; ++e) {
        index.push_back(0);
        for (std::size_t i = 0; i < n; ++i) {
            const bool masked = any_masked && images.masked[e * n + i];
            index.push_back(masked ? 1 : first_patch + e * n + i);
        }
    }
    auto h = gather_rows(concat_rows(table), std::span<const std::size_t>(index));
    h = add_rows(h, param("image.pos"));
    return add_rows(h, param("image.type"));
}

template <typename T>
Tensor<T> Model<T>::embed_text(std::span<const data::TokenSequence> texts, std::size_t length) const {
    if (texts.empty()) throw DimensionError("embed_text: empty batch");
    if (length > config_.max_text_length) {
        throw DimensionError("embed_text: length " + std::to_string(length) + " exceeds max_text_length " +
                             std::to_string(config_.max_text_length));
    }
    std::vector<std::size_t> ids;
    ids.reserve(texts.size() * length);
    for (const auto& t : texts) {
        if (t.size() > length) {
            throw DimensionError("embed_text: sequence of " + std::to_string(t.size()) + " tokens exceeds " +
                                 std::to_string(length));
        }
        for (auto id : t.ids) {
            if (id < 0 || static_cast<std::size_t>(id) >= config_.vocab) {
                throw IndexError("embed_text: token id " + std::to_string(id) + " outside vocabulary of " +
                                 std::to_string(config_.vocab));
            }
            ids.push_back(static_cast<std::size_t>(id));
        }
        ids.insert(ids.end(), length - t.size(), static_cast<std::size_t>(data::kPad));
    }
    std::vector<std::size_t> positions(length);
    std::iota(positions.begin(), positions.end(), 0);
    auto h = gather_rows(param("text.word"), std::span<const std::size_t>(ids));
    h = add_rows(h, gather_rows(param("text.pos"), std::span<const std::size_t>(positions)));
    return add_rows(h, param("text.type"));
}

template <typename T>
Tensor<T> Model<T>::self_attention(const Tensor<T>& x, const SequenceLayout& layout, const std::string& prefix) const {
    auto h = layer_norm(x, param(prefix + ".ln.gamma"), param(prefix + ".ln.beta"), T(config_.ln_eps));
    auto qkv = linear(h, param(prefix + ".qkv.weight"), param(prefix + ".qkv.bias"));
    auto a = attention(qkv, layout.batch, layout.seq, config_.heads, std::span<const std::uint8_t>(layout.key_valid));
    return linear(a, param(prefix + ".out.weight"), param(prefix + ".out.bias"));
}

template <typename T>
Tensor<T> Model<T>::attention_block(const Tensor<T>& x, const SequenceLayout& layout, std::size_t layer) const {
    if (!config_.separate_attention_at(layer)) return self_attention(x, layout, attn_prefix(layer, "attn"));
    if (layout.mode == Modality::image) return self_attention(x, layout, attn_prefix(layer, "attn_v"));
    if (layout.mode == Modality::text) return self_attention(x, layout, attn_prefix(layer, "attn_l"));

    // Pair input: each modality projects with its own parameters, then one
    // joint softmax over the whole sequence.
    const auto pv = attn_prefix(layer, "attn_v"), pl = attn_prefix(layer, "attn_l");
    const T eps = T(config_.ln_eps);
    auto project = [&](const std::vector<std::size_t>& rows, const std::string& p) {
        auto part = gather_rows(x, std::span<const std::size_t>(rows));
        auto h = layer_norm(part, param(p + ".ln.gamma"), param(p + ".ln.beta"), eps);
        return linear(h, param(p + ".qkv.weight"), param(p + ".qkv.bias"));
    };
    auto qkv = merge_segments(project(layout.text_rows, pl), project(layout.image_rows, pv), layout);
    auto a = attention(qkv, layout.batch, layout.seq, config_.heads, std::span<const std::uint8_t>(layout.key_valid));
    auto out = [&](const std::vector<std::size_t>& rows, const std::string& p) {
        return linear(gather_rows(a, std::span<const std::size_t>(rows)), param(p + ".out.weight"),
                      param(p + ".out.bias"));
    };
    return merge_segments(out(layout.text_rows, pl), out(layout.image_rows, pv), layout);
}

template <typename T>
Tensor<T> Model<T>::ffn(const Tensor<T>& x, const std::string& prefix) const {
    auto h = layer_norm(x, param(prefix + ".ln.gamma"), param(prefix + ".ln.beta"), T(config_.ln_eps));
    h = gelu(linear(h, param(prefix + ".fc1.weight"), param(prefix + ".fc1.bias")));
    return linear(h, param(prefix + ".fc2.weight"), param(prefix + ".fc2.bias"));
}

template <typename T>
Tensor<T> Model<T>::mome_block(const Tensor<T>& h, const SequenceLayout& layout, std::size_t layer) const {
    if (h.rank() != 2 || h.rows() != layout.rows() || h.cols() != config_.hidden) {
        throw DimensionError("mome_block: hidden " + shape_str(h.shape()) + " does not match layout of " +
                             std::to_string(layout.rows()) + " rows x " + std::to_string(config_.hidden));
    }
    auto x = add(h, attention_block(h, layout, layer));
    Tensor<T> update;
    if (layout.mode != Modality::pair) {
        const auto seg = layout.mode == Modality::image ? Segment::image : Segment::text;
        update = ffn(x, expert_prefix(layer, route_expert(layout.mode, seg, layer, config_)));
    } else {
        const auto text_kind = route_expert(Modality::pair, Segment::text, layer, config_);
        const auto image_kind = route_expert(Modality::pair, Segment::image, layer, config_);
        if (text_kind == image_kind) {
            update = ffn(x, expert_prefix(layer, text_kind));
        } else {
            auto text_part = ffn(gather_rows(x, std::span<const std::size_t>(layout.text_rows)),
                                 expert_prefix(layer, text_kind));
            auto image_part = ffn(gather_rows(x, std::span<const std::size_t>(layout.image_rows)),
                                  expert_prefix(layer, image_kind));
            update = merge_segments(text_part, image_part, layout);
        }
    }
    return add(x, update);
}

template <typename T>
Encoded<T> Model<T>::run_layers(Tensor<T> h, SequenceLayout layout) const {
    for (std::size_t l = 1; l <= config_.layers; ++l) h = mome_block(h, layout, l);
    *forwards_ += layout.batch;
    return {std::move(layout), std::move(h)};
}

namespace {

std::size_t padded_length(std::span<const data::TokenSequence> texts, std::vector<std::uint8_t>& valid) {
    std::size_t length = 0;
    for (const auto& t : texts) length = std::max(length, t.size());
    valid.assign(texts.size() * length, 0);
    for (std::size_t b = 0; b < texts.size(); ++b) std::fill_n(valid.begin() + b * length, texts[b].size(), 1);
    return length;
}

}  // namespace

template <typename T>
Encoded<T> Model<T>::encode_image(const ImageBatch& images) const {
    auto h = embed_image(images);
    return run_layers(std::move(h), SequenceLayout::image_only(images.batch, config_.num_patches() + 1));
}

template <typename T>
Encoded<T> Model<T>::encode_text(std::span<const data::TokenSequence> texts) const {
    std::vector<std::uint8_t> valid;
    const std::size_t length = padded_length(texts, valid);
    auto h = embed_text(texts, length);
    return run_layers(std::move(h), SequenceLayout::text_only(texts.size(), length, std::move(valid)));
}

template <typename T>
Encoded<T> Model<T>::encode_pair(const ImageBatch& images, std::span<const data::TokenSequence> texts) const {
    if (images.batch != texts.size()) {
        throw DimensionError("encode_pair: " + std::to_string(images.batch) + " images but " +
                             std::to_string(texts.size()) + " texts");
    }
    std::vector<std::uint8_t> valid;
    const std::size_t length = padded_length(texts, valid);
    auto h = concat_vl(embed_text(texts, length), embed_image(images), images.batch);
    return run_layers(std::move(h),
                      SequenceLayout::pair(texts.size(), length, config_.num_patches() + 1, std::move(valid)));
}

template <typename T>
Encoded<T> Model<T>::encode(Modality mode, const ImageBatch& images, std::span<const data::TokenSequence> texts) const {
    const bool has_images = images.batch > 0, has_texts = !texts.empty();
    switch (mode) {
        case Modality::image:
            if (!has_images || has_texts) throw ContractError("encode: image mode takes images only");
            return encode_image(images);
        case Modality::text:
            if (has_images || !has_texts) throw ContractError("encode: text mode takes texts only");
            return encode_text(texts);
        case Modality::pair:
            if (!has_images || !has_texts) throw ContractError("encode: pair mode needs images and texts");
            return encode_pair(images, texts);
    }
    throw ContractError("encode: unknown mode");
}

template <typename T>
Tensor<T> Model<T>::image_embedding(const Encoded<T>& enc) const {
    return project_cls(cls_rows(enc, Segment::image), param("head.itc_image.weight"));
}

template <typename T>
Tensor<T> Model<T>::text_embedding(const Encoded<T>& enc) const {
    return project_cls(cls_rows(enc, Segment::text), param("head.itc_text.weight"));
}

template <typename T>
Tensor<T> concat_vl(const Tensor<T>& text, const Tensor<T>& image, std::size_t batch) {
    if (text.cols() != image.cols()) {
        throw DimensionError("concat_vl: hidden size mismatch " + shape_str(text.shape()) + " vs " +
                             shape_str(image.shape()));
    }
    if (batch == 0 || text.rows() % batch != 0 || image.rows() % batch != 0) {
        throw DimensionError("concat_vl: rows do not split into " + std::to_string(batch) + " examples");
    }
    if (batch == 1) return concat_rows<T>({text, image});
    const std::size_t st = text.rows() / batch, sv = image.rows() / batch, offset = text.rows();
    std::vector<std::size_t> index;
    index.reserve(text.rows() + image.rows());
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t t = 0; t < st; ++t) index.push_back(b * st + t);
        for (std::size_t i = 0; i < sv; ++i) index.push_back(offset + b * sv + i);
    }
    return gather_rows(concat_rows<T>({text, image}), std::span<const std::size_t>(index));
}

template <typename T>
Tensor<T> cls_rows(const Encoded<T>& encoded, Segment segment) {
    const auto& l = encoded.layout;
    if ((segment == Segment::image && l.mode == Modality::text) ||
        (segment == Segment::text && l.mode == Modality::image)) {
        throw ContractError("cls_rows: encoding has no such segment");
    }
    std::vector<std::size_t> rows(l.batch);
    for (std::size_t b = 0; b < l.batch; ++b) rows[b] = segment == Segment::image ? l.image_cls(b) : l.text_cls(b);
    return gather_rows(encoded.hidden, std::span<const std::size_t>(rows));
}

template <typename T>
Tensor<T> project_cls(const Tensor<T>& cls, const Tensor<T>& weight) {
    return l2_normalize(matmul(cls, weight));
}

template class Model<float>;
template class Model<double>;
template Tensor<float> concat_vl(const Tensor<float>&, const Tensor<float>&, std::size_t);
template Tensor<double> concat_vl(const Tensor<double>&, const Tensor<double>&, std::size_t);
template Tensor<float> cls_rows(const Encoded<float>&, Segment);
template Tensor<double> cls_rows(const Encoded<double>&, Segment);
template Tensor<float> project_cls(const Tensor<float>&, const Tensor<float>&);
template Tensor<double> project_cls(const Tensor<double>&, const Tensor<double>&);

}  // namespace vlmo::model
