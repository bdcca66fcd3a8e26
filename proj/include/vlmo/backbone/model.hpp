#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "vlmo/backbone/config.hpp"
#include "vlmo/backbone/params.hpp"
#include "vlmo/data/text.hpp"
#include "vlmo/numerics/tensor.hpp"

namespace vlmo::model {

// Patch grids for a batch of images, example-major.
struct ImageBatch {
    std::span<const float> patches;  // batch x num_patches x patch_dim
    std::size_t batch = 0;
    // Optional batch x num_patches flags; flagged patches are replaced by the
    // learnable mask embedding before position/type embeddings are added.
    std::span<const std::uint8_t> masked;
};

// Row layout of a batch of encoded sequences. Every example occupies `seq`
// consecutive rows: text block (text_length rows, padded) then image block
// (image_length rows) for pairs; a single block for unimodal input.
struct SequenceLayout {
    Modality mode = Modality::image;
    std::size_t batch = 0;
    std::size_t seq = 0;
    std::size_t text_length = 0;
    std::size_t image_length = 0;
    std::vector<std::uint8_t> key_valid;  // empty when nothing is padded
    std::vector<std::size_t> text_rows;
    std::vector<std::size_t> image_rows;
    // Row p of the sequence lives at merge_index[p] of [text rows; image rows].
    std::vector<std::size_t> merge_index;

    std::size_t rows() const { return batch * seq; }
    std::size_t text_cls(std::size_t b) const { return b * seq; }
    std::size_t image_cls(std::size_t b) const { return b * seq + (mode == Modality::pair ? text_length : 0); }
    Segment segment_of(std::size_t row) const;

    static SequenceLayout image_only(std::size_t batch, std::size_t image_length);
    static SequenceLayout text_only(std::size_t batch, std::size_t text_length, std::vector<std::uint8_t> valid);
    static SequenceLayout pair(std::size_t batch, std::size_t text_length, std::size_t image_length,
                               std::vector<std::uint8_t> text_valid);
};

template <typename T>
struct Encoded {
    SequenceLayout layout;
    Tensor<T> hidden;  // layout.rows() x D
};

template <typename T>
class Model {
  public:
    // Fresh parameters: truncated normal (std 0.02) weights, zero biases,
    // unit layer-norm gains, log-temperature ln(0.07).
    Model(const ModelConfig& config, std::uint64_t seed);
    // Adopts existing parameters; throws DataError if the manifest does not
    // match what the config requires.
    Model(const ModelConfig& config, ParameterStore<T> params);

    const ModelConfig& config() const { return config_; }
    ParameterStore<T>& params() { return params_; }
    const ParameterStore<T>& params() const { return params_; }
    const Tensor<T>& param(const std::string& name) const { return params_.get(name); }

    // batch*(N+1) x D, I_CLS first in each example.
    Tensor<T> embed_image(const ImageBatch& images) const;
    // batch*length x D, sequences padded with [PAD] to `length`.
    Tensor<T> embed_text(std::span<const data::TokenSequence> texts, std::size_t length) const;

    Tensor<T> mome_block(const Tensor<T>& h, const SequenceLayout& layout, std::size_t layer) const;

    Encoded<T> encode_image(const ImageBatch& images) const;
    Encoded<T> encode_text(std::span<const data::TokenSequence> texts) const;
    Encoded<T> encode_pair(const ImageBatch& images, std::span<const data::TokenSequence> texts) const;
    // Dispatches on mode; throws ContractError when the inputs do not match it.
    Encoded<T> encode(Modality mode, const ImageBatch& images, std::span<const data::TokenSequence> texts) const;

    // Projected, unit-norm ITC embeddings of the image / text CLS rows.
    Tensor<T> image_embedding(const Encoded<T>& enc) const;
    Tensor<T> text_embedding(const Encoded<T>& enc) const;

    // Number of sequences encoded since construction or the last reset.
    std::uint64_t forward_count() const { return *forwards_; }
    void reset_forward_count() { *forwards_ = 0; }

    template <typename U>
    Model<U> cast() const {
        return Model<U>(config_, params_.template cast<U>());
    }

  private:
    Tensor<T> attention_block(const Tensor<T>& x, const SequenceLayout& layout, std::size_t layer) const;
    Tensor<T> self_attention(const Tensor<T>& x, const SequenceLayout& layout, const std::string& prefix) const;
    Tensor<T> ffn(const Tensor<T>& x, const std::string& prefix) const;
    Encoded<T> run_layers(Tensor<T> h, SequenceLayout layout) const;

    ModelConfig config_;
    ParameterStore<T> params_;
    std::shared_ptr<std::uint64_t> forwards_ = std::make_shared<std::uint64_t>(0);
};

// Text block then image block per example, rows copied unchanged.
template <typename T>
Tensor<T> concat_vl(const Tensor<T>& text, const Tensor<T>& image, std::size_t batch);

// Rows of `encoded` at the CLS positions, batch x D.
template <typename T>
Tensor<T> cls_rows(const Encoded<T>& encoded, Segment segment);

// l2_normalize(x * weight).
template <typename T>
Tensor<T> project_cls(const Tensor<T>& cls, const Tensor<T>& weight);

// Expert parameter-name prefix for a layer ("layer.3.ffn_v").
std::string expert_prefix(std::size_t layer, ExpertKind kind);
// Names of every parameter a config requires, in registration order.
std::vector<std::pair<std::string, Shape>> parameter_manifest(const ModelConfig& config);

}  // namespace vlmo::model
