#pragma once

// Mask training: sign-gradient descent on a per-identity perturbation field
// against a team of embedding models.
//
// The protected view of an image is
//
//   resize( clamp01( face_crop(x) - quantize(resize(mask, crop)) ), model-input )
//
// and the training objective combines a protection term (negated mean arccos
// distance between clean and protected embeddings across the team) with a
// perceptual hinge on the SSIM between the clean and protected crop,
// weighted by a dynamically scheduled factor. The mask lives at a fixed
// 32x32 native resolution and is bilinearly resized to each crop.

#include <cstdint>
#include <string>
#include <vector>

#include "p3mask/frcore.hpp"
#include "p3mask/graph.hpp"
#include "p3mask/image.hpp"
#include "p3mask/mask.hpp"
#include "p3mask/synthdata.hpp"

namespace p3mask {

inline constexpr int kMaskSize = 32;

struct MaskTrainConfig {
    double eta = 0.001;        // sign-step size
    int batch_size = 4;
    double epsilon = 0.063;    // L-infinity budget
    double omega = 0.03;       // allowed SSIM degradation is 2*omega
    int epochs = 50;
    std::uint64_t seed = 0;
    double lambda_init = 1.0;  // perceptual weight and its schedule bounds
    double lambda_min = 0.25;
    double lambda_max = 64.0;
};

/// Builds the protected crop at crop resolution: crop constant, minus the
/// (optionally quantized) mask resized to the crop, clamped to [0, 1].
/// `mask` must be a [C, h, w] node matching the image's channel count.
/// `quantized` selects whether the 8-bit snap is applied in the forward pass;
/// gradient checks use the unquantized variant because the snap's
/// straight-through surrogate has no meaningful finite-difference counterpart.
Graph::NodeId protected_crop_node(Graph& g, const Image& x, Graph::NodeId mask,
                                  bool quantized = true);

/// Protected view resized to a model's input: resize(protected crop, n, n).
Graph::NodeId theta_protect_node(Graph& g, const Image& x, Graph::NodeId mask,
                                 int model_input_size, bool quantized = true);

/// Image-space equivalent of theta_protect_node for a concrete mask; produces
/// bit-identical pixel values to the graph path.
Image theta_protect(const Image& x, const P3Mask& mask, int model_input_size);

/// Differentiable SSIM between two same-shape [C,H,W] nodes; reproduces
/// imaging ssim() bit-for-bit (same window, same moment arithmetic, same
/// small-image fallback).
Graph::NodeId ssim_node(Graph& g, Graph::NodeId a, Graph::NodeId b);

/// Protection term: minus the team-mean arccos distance between each model's
/// clean embedding of face_crop(x) and its embedding of the protected view.
Graph::NodeId loss_protect_node(Graph& g, const Image& x, Graph::NodeId mask,
                                const std::vector<const EmbeddingModel*>& team,
                                bool quantized = true);

/// Perceptual term: lambda * max((1 - ssim)/2 - omega, 0) on the clean vs
/// protected crop.
Graph::NodeId loss_percept_node(Graph& g, const Image& x, Graph::NodeId mask, double omega,
                                double lambda, bool quantized = true);

/// Per-image probe points inside an assembled total loss.
struct ImageLossNodes {
    Graph::NodeId total = -1;
    Graph::NodeId hinge = -1;                // pre-lambda hinge value; active iff > 0
    std::vector<Graph::NodeId> distances;    // per team model, model order
};

/// Assembles the full per-image objective, sharing the protected crop between
/// both terms. Team must be non-empty.
ImageLossNodes image_loss_nodes(Graph& g, const Image& x, Graph::NodeId mask,
                                const std::vector<const EmbeddingModel*>& team, double omega,
                                double lambda, bool quantized = true);

Graph::NodeId loss_total_node(Graph& g, const Image& x, Graph::NodeId mask,
                              const std::vector<const EmbeddingModel*>& team, double omega,
                              double lambda, bool quantized = true);

/// Scalar perceptual loss for a known SSIM value (same arithmetic as the
/// graph path).
double hinge_from_ssim(double ssim_value, double omega, double lambda);

/// Epoch-end schedule: hinge active on more than half of the per-image
/// evaluations doubles lambda (capped at lambda_max); never active decays it
/// by 0.9 (floored at lambda_min); otherwise unchanged.
double schedule_lambda(double lambda, double active_fraction, const MaskTrainConfig& config);

/// Per-epoch training diagnostics.
struct TrainTrace {
    double mean_loss = 0.0;               // mean per-image total loss
    double mean_protect_distance = 0.0;   // mean per-image, per-model arccos distance
    double hinge_active_fraction = 0.0;
    double lambda = 0.0;                  // value in effect during the epoch
};

/// Trains a mask for `identity` on its gallery-seen images against `team`.
/// Deterministic for a fixed config; the mask starts at an identity-seeded
/// uniform draw inside the budget box (a zero start is a critical point of
/// the distance term, and one shared by all identities — keys must not
/// converge), every update is clip(mask - eta * sign(mean batch gradient))
/// with sign(0) = 0, and the perceptual weight is rescheduled after each
/// epoch. Throws std::invalid_argument on bad config or insufficient images
/// and std::runtime_error if the loss turns non-finite.
P3Mask train_mask(const DatasetManifest& manifest, const std::vector<LabeledImage>& images,
                  const std::string& identity, const std::vector<const EmbeddingModel*>& team,
                  const MaskTrainConfig& config, std::vector<TrainTrace>* trace = nullptr);

} // namespace p3mask
