#pragma once

// Face-embedding models and closed-set identification.
//
// A model is a small convolutional network described by a textual
// architecture descriptor, e.g.
//
//   in:32x3;conv:3x8x2;relu;conv:3x16x2;relu;gap;dense:32
//
// (input 32x32x3; conv layers are kernel x out-channels x stride with valid
// padding; gap is global average pooling; the final dense layer's width is
// the embedding dimension). Models are trained as softmax classifiers over
// the gallery-seen identities; the classifier head is discarded afterwards
// and the embedding is the L2-normalized penultimate activation.
// Identification is nearest-neighbor in arccos distance over a gallery of
// enrolled embeddings.

#include <cstdint>
#include <string>
#include <vector>

#include "p3mask/graph.hpp"
#include "p3mask/image.hpp"
#include "p3mask/rng.hpp"
#include "p3mask/synthdata.hpp"
#include "p3mask/tensor.hpp"

namespace p3mask {

struct Layer {
    enum class Kind { Conv, Relu, Gap, Dense };
    Kind kind = Kind::Relu;
    int kernel = 0;     // conv
    int channels = 0;   // conv out-channels
    int stride = 1;     // conv
    int out_dim = 0;    // dense
};

struct Architecture {
    int input_size = 0;
    int input_channels = 0;
    std::vector<Layer> layers;

    /// Parses a descriptor; throws std::invalid_argument with the offending
    /// token on malformed input, and validates that the layer sequence is
    /// well-shaped (conv kernels fit, dense follows gap, ends in dense).
    static Architecture parse(const std::string& descriptor);

    std::string descriptor() const;

    int embedding_dim() const;

    /// Parameter tensor shapes in consumption order: per conv layer a weight
    /// [out,in,k,k] and bias [out]; per dense layer a weight [in,out] and
    /// bias [out].
    std::vector<std::vector<int>> param_shapes() const;

    /// He-style uniform weight init (biases zero), drawn from `rng` in
    /// param_shapes order.
    std::vector<Tensor> init_params(Rng& rng) const;

    /// Applies the network inside `g`. `input` must be a [channels,size,size]
    /// node with the nominal [0, 1] pixel range; it is centered to
    /// [-0.5, 0.5] before the first layer. `params` are node ids in
    /// param_shapes order. Returns the unnormalized embedding node (rank-1).
    Graph::NodeId forward(Graph& g, Graph::NodeId input,
                          const std::vector<Graph::NodeId>& params) const;
};

struct EmbeddingModel {
    std::string id;
    Architecture arch;
    std::vector<Tensor> params;
    double train_accuracy = 0.0;   // percent, on the training subset
    std::uint64_t train_seed = 0;

    /// Embeds a face image: resizes to the model input size, runs the network
    /// and L2-normalizes. Deterministic; throws on channel mismatch or a
    /// degenerate (zero) embedding.
    Tensor embed(const Image& face) const;

    /// Copies the parameters into `g` as leaves, in param_shapes order.
    std::vector<Graph::NodeId> insert_params(Graph& g, bool requires_grad) const;
};

/// Angular distance acos(<a,b>) between two unit vectors, with the inner
/// product clamped the same way the graph arccos clamps. Inputs must be
/// rank-1, same length and unit-norm within 1e-6.
double arccos_dist(const Tensor& a, const Tensor& b);

struct GalleryEntry {
    std::string identity;
    std::string role;
    Tensor embedding;
};

struct Gallery {
    std::vector<GalleryEntry> entries;
};

/// Embeds the given images with the model, preserving order.
Gallery build_gallery(const EmbeddingModel& model,
                      const std::vector<const LabeledImage*>& images);

/// Index of the nearest gallery entry by arccos distance; exact ties resolve
/// to the lowest index. The gallery must be non-empty.
int fr_identify_index(const Tensor& probe_embedding, const Gallery& gallery);

/// Identity label of the nearest gallery entry.
std::string fr_identify(const EmbeddingModel& model, const Image& probe,
                        const Gallery& gallery);

/// Percentage of probes identified as their true identity.
double fr_accuracy(const EmbeddingModel& model,
                   const std::vector<const LabeledImage*>& probes, const Gallery& gallery);

struct PoolModelSpec {
    std::string id;
    std::string arch;
    std::uint64_t seed_tag = 0;       // decorrelates sibling models
    double subset_fraction = 1.0;     // fraction of each identity's seen images, in (0.5, 1]
};

/// The default pool: two architectures, three (seed, subset) variants each.
std::vector<PoolModelSpec> default_pool_specs(int image_size, int channels);

struct PoolTrainConfig {
    int epochs = 60;
    int batch_size = 8;
    double learning_rate = 0.02;
    double momentum = 0.9;
    double clip_norm = 5.0;   // per-batch mean-gradient L2 clip; <= 0 disables
    std::uint64_t seed = 0;
};

/// Trains one pool model on the manifest's gallery-seen images (classifier
/// head over identities, discarded afterwards). `images` must be the loaded
/// dataset in manifest order. Deterministic for a fixed config; throws
/// std::runtime_error if the loss diverges.
EmbeddingModel train_pool_model(const DatasetManifest& manifest,
                                const std::vector<LabeledImage>& images,
                                const PoolModelSpec& spec, const PoolTrainConfig& config);

/// Binary model checkpoint (magic "P3FM", little-endian fields, CRC-32
/// trailer). Loading validates magic, version, CRC and parameter shapes.
void model_save(const EmbeddingModel& model, const std::string& path);
EmbeddingModel model_load(const std::string& path);

} // namespace p3mask
