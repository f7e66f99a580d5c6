#include "p3mask/maskgen.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "p3mask/rng.hpp"

namespace p3mask {

namespace {

void check_mask_node(const Graph& g, Graph::NodeId mask, int channels) {
    const Tensor& v = g.value(mask);
    if (v.rank() != 3 || v.dim(0) != channels) {
        throw std::invalid_argument("mask node must be [" + std::to_string(channels) +
                                    ",h,w], got " + shape_str(v.shape()));
    }
}

constexpr double kSsimC1 = 0.01 * 0.01;
constexpr double kSsimC2 = 0.03 * 0.03;
constexpr int kSsimWindow = 11;

} // namespace

Graph::NodeId protected_crop_node(Graph& g, const Image& x, Graph::NodeId mask, bool quantized) {
    const Image crop = face_crop(x);
    check_mask_node(g, mask, crop.channels());
    Graph::NodeId m = g.resize_bilinear(mask, crop.height(), crop.width());
    if (quantized) m = g.quantize8(m);
    return g.clamp(g.sub(g.constant(image_to_chw(crop)), m), 0.0, 1.0);
}

Graph::NodeId theta_protect_node(Graph& g, const Image& x, Graph::NodeId mask,
                                 int model_input_size, bool quantized) {
    return g.resize_bilinear(protected_crop_node(g, x, mask, quantized), model_input_size,
                             model_input_size);
}

Image theta_protect(const Image& x, const P3Mask& mask, int model_input_size) {
    mask.validate();
    const Image crop = face_crop(x);
    if (mask.values.channels() != crop.channels()) {
        throw std::invalid_argument("mask has " + std::to_string(mask.values.channels()) +
                                    " channels, image has " + std::to_string(crop.channels()));
    }
    const Image m = quantize(resize_bilinear(mask.values, crop.height(), crop.width()));
    Image prot = crop;
    for (std::size_t i = 0; i < prot.data().size(); ++i) {
        const double v = prot.data()[i] - m.data()[i];
        prot.data()[i] = v < 0.0 ? 0.0 : v > 1.0 ? 1.0 : v;
    }
    return resize_bilinear(prot, model_input_size, model_input_size);
}

Graph::NodeId ssim_node(Graph& g, Graph::NodeId a, Graph::NodeId b) {
    const Tensor& va = g.value(a);
    const Tensor& vb = g.value(b);
    if (va.rank() != 3 || !va.same_shape(vb)) {
        throw std::invalid_argument("ssim_node: expected same-shape [C,H,W] nodes, got " +
                                    shape_str(va.shape()) + " vs " + shape_str(vb.shape()));
    }
    const int c = va.dim(0), h = va.dim(1), w = va.dim(2);

    Graph::NodeId mu_a, mu_b, raw_aa, raw_bb, raw_ab;
    if (std::min(h, w) >= kSsimWindow) {
        // Channel-diagonal window kernel: each output channel sees only its
        // own input channel through the Gaussian window, so the five window
        // moments below accumulate in exactly the order the direct SSIM uses.
        Tensor kernel({c, c, kSsimWindow, kSsimWindow});
        const std::vector<double>& win = ssim_window_11();
        for (int ch = 0; ch < c; ++ch) {
            for (int p = 0; p < kSsimWindow; ++p) {
                for (int q = 0; q < kSsimWindow; ++q) {
                    kernel.data()[((static_cast<std::size_t>(ch) * c + ch) * kSsimWindow + p) *
                                      kSsimWindow +
                                  q] = win[static_cast<std::size_t>(p * kSsimWindow + q)];
                }
            }
        }
        const Graph::NodeId wk = g.constant(std::move(kernel));
        mu_a = g.conv2d(a, wk, 1);
        mu_b = g.conv2d(b, wk, 1);
        raw_aa = g.conv2d(g.mul(a, a), wk, 1);
        raw_bb = g.conv2d(g.mul(b, b), wk, 1);
        raw_ab = g.conv2d(g.mul(a, b), wk, 1);
    } else {
        mu_a = g.spatial_mean(a);
        mu_b = g.spatial_mean(b);
        raw_aa = g.spatial_mean(g.mul(a, a));
        raw_bb = g.spatial_mean(g.mul(b, b));
        raw_ab = g.spatial_mean(g.mul(a, b));
    }

    // Same expression order as the scalar moment helper, so values agree
    // bit-for-bit with imaging ssim().
    const Graph::NodeId mu_aa = g.mul(mu_a, mu_a);
    const Graph::NodeId mu_bb = g.mul(mu_b, mu_b);
    const Graph::NodeId mu_ab = g.mul(mu_a, mu_b);
    const Graph::NodeId var_a = g.sub(raw_aa, mu_aa);
    const Graph::NodeId var_b = g.sub(raw_bb, mu_bb);
    const Graph::NodeId cov = g.sub(raw_ab, mu_ab);
    const Graph::NodeId two = g.constant_scalar(2.0);
    const Graph::NodeId t1 = g.add(g.mul(two, mu_ab), g.constant_scalar(kSsimC1));
    const Graph::NodeId t2 = g.add(g.mul(two, cov), g.constant_scalar(kSsimC2));
    const Graph::NodeId d1 = g.add(g.add(mu_aa, mu_bb), g.constant_scalar(kSsimC1));
    const Graph::NodeId d2 = g.add(g.add(var_a, var_b), g.constant_scalar(kSsimC2));
    return g.mean(g.div(g.mul(t1, t2), g.mul(d1, d2)));
}

namespace {

/// Shared assembly. `prot` is the protected crop node, `crop_img` the clean
/// crop; returns the per-model distance nodes in team order.
std::vector<Graph::NodeId> distance_nodes(Graph& g, const Image& crop_img, Graph::NodeId prot,
                                          const std::vector<const EmbeddingModel*>& team) {
    std::vector<Graph::NodeId> distances;
    distances.reserve(team.size());
    for (const EmbeddingModel* model : team) {
        if (model == nullptr) throw std::invalid_argument("team contains a null model");
        const Graph::NodeId view =
            g.resize_bilinear(prot, model->arch.input_size, model->arch.input_size);
        const Graph::NodeId emb =
            g.l2_normalize(model->arch.forward(g, view, model->insert_params(g, false)));
        const Graph::NodeId clean = g.constant(model->embed(crop_img));
        distances.push_back(g.arccos(g.dot(emb, clean)));
    }
    return distances;
}

Graph::NodeId mean_neg_distance(Graph& g, const std::vector<Graph::NodeId>& distances) {
    Graph::NodeId acc = distances.front();
    for (std::size_t i = 1; i < distances.size(); ++i) acc = g.add(acc, distances[i]);
    const Graph::NodeId avg =
        g.div(acc, g.constant_scalar(static_cast<double>(distances.size())));
    return g.sub(g.constant_scalar(0.0), avg);
}

} // namespace

Graph::NodeId loss_protect_node(Graph& g, const Image& x, Graph::NodeId mask,
                                const std::vector<const EmbeddingModel*>& team, bool quantized) {
    if (team.empty()) throw std::invalid_argument("loss_protect: team is empty");
    const Image crop = face_crop(x);
    const Graph::NodeId prot = protected_crop_node(g, x, mask, quantized);
    return mean_neg_distance(g, distance_nodes(g, crop, prot, team));
}

Graph::NodeId loss_percept_node(Graph& g, const Image& x, Graph::NodeId mask, double omega,
                                double lambda, bool quantized) {
    const Image crop = face_crop(x);
    const Graph::NodeId crop_const = g.constant(image_to_chw(crop));
    const Graph::NodeId prot = protected_crop_node(g, x, mask, quantized);
    const Graph::NodeId s = ssim_node(g, crop_const, prot);
    const Graph::NodeId one_minus = g.sub(g.constant_scalar(1.0), s);
    const Graph::NodeId hinge = g.max_const(
        g.sub(g.mul(one_minus, g.constant_scalar(0.5)), g.constant_scalar(omega)), 0.0);
    return g.mul(hinge, g.constant_scalar(lambda));
}

ImageLossNodes image_loss_nodes(Graph& g, const Image& x, Graph::NodeId mask,
                                const std::vector<const EmbeddingModel*>& team, double omega,
                                double lambda, bool quantized) {
    if (team.empty()) throw std::invalid_argument("image loss: team is empty");
    const Image crop = face_crop(x);
    check_mask_node(g, mask, crop.channels());

    Graph::NodeId m = g.resize_bilinear(mask, crop.height(), crop.width());
    if (quantized) m = g.quantize8(m);
    const Graph::NodeId crop_const = g.constant(image_to_chw(crop));
    const Graph::NodeId prot = g.clamp(g.sub(crop_const, m), 0.0, 1.0);

    ImageLossNodes nodes;
    nodes.distances = distance_nodes(g, crop, prot, team);
    const Graph::NodeId lp = mean_neg_distance(g, nodes.distances);

    const Graph::NodeId s = ssim_node(g, crop_const, prot);
    const Graph::NodeId one_minus = g.sub(g.constant_scalar(1.0), s);
    nodes.hinge = g.max_const(
        g.sub(g.mul(one_minus, g.constant_scalar(0.5)), g.constant_scalar(omega)), 0.0);
    const Graph::NodeId percept = g.mul(nodes.hinge, g.constant_scalar(lambda));

    nodes.total = g.add(lp, percept);
    return nodes;
}

Graph::NodeId loss_total_node(Graph& g, const Image& x, Graph::NodeId mask,
                              const std::vector<const EmbeddingModel*>& team, double omega,
                              double lambda, bool quantized) {
    return image_loss_nodes(g, x, mask, team, omega, lambda, quantized).total;
}

double hinge_from_ssim(double ssim_value, double omega, double lambda) {
    const double h = (1.0 - ssim_value) * 0.5 - omega;
    return lambda * std::max(h, 0.0);
}

double schedule_lambda(double lambda, double active_fraction, const MaskTrainConfig& config) {
    if (active_fraction > 0.5) return std::min(2.0 * lambda, config.lambda_max);
    if (active_fraction == 0.0) return std::max(0.9 * lambda, config.lambda_min);
    return lambda;
}

P3Mask train_mask(const DatasetManifest& manifest, const std::vector<LabeledImage>& images,
                  const std::string& identity, const std::vector<const EmbeddingModel*>& team,
                  const MaskTrainConfig& config, std::vector<TrainTrace>* trace) {
    if (!(config.eta > 0.0) || config.batch_size < 1 || !(config.epsilon > 0.0) ||
        config.omega < 0.0 || config.omega >= 0.5 || config.epochs < 0) {
        throw std::invalid_argument(
            "mask training config invalid (eta > 0, batch >= 1, epsilon > 0, omega in [0, 0.5), "
            "epochs >= 0)");
    }
    if (!(config.lambda_min > 0.0) || config.lambda_init < config.lambda_min ||
        config.lambda_init > config.lambda_max) {
        throw std::invalid_argument("mask training config invalid (0 < lambda_min <= lambda_init "
                                    "<= lambda_max)");
    }
    if (team.empty()) throw std::invalid_argument("mask training: team is empty");
    for (const EmbeddingModel* m : team) {
        if (m == nullptr) throw std::invalid_argument("mask training: team contains a null model");
        if (m->arch.input_channels != manifest.channels) {
            throw std::invalid_argument("mask training: model " + m->id + " expects " +
                                        std::to_string(m->arch.input_channels) +
                                        " channels, dataset has " +
                                        std::to_string(manifest.channels));
        }
    }

    std::vector<const Image*> seen;
    for (const LabeledImage& li : images) {
        if (li.identity == identity && li.role == kRoleGallerySeen) seen.push_back(&li.image);
    }
    if (static_cast<int>(seen.size()) < config.batch_size) {
        throw std::invalid_argument("identity " + identity + " has " +
                                    std::to_string(seen.size()) +
                                    " gallery-seen images; batch size " +
                                    std::to_string(config.batch_size) + " requires at least that");
    }

    Tensor mask({manifest.channels, kMaskSize, kMaskSize});
    // Seeded random start inside the budget box. A zero start is a critical
    // point of the distance term, and it is shared by every identity: masks
    // descending from it converge to near-identical fields, which would let
    // one owner's key undo another owner's protection. Independent starts
    // keep the keys apart.
    {
        Rng init_rng(derive_seed(config.seed, "mask-init", hash_label(identity)));
        for (double& v : mask.data()) v = init_rng.uniform(-config.epsilon, config.epsilon);
    }
    Rng rng(derive_seed(config.seed, "mask-train", hash_label(identity)));
    double lambda = config.lambda_init;

    const std::size_t n = seen.size();
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        rng.shuffle(order);
        double loss_sum = 0.0, dist_sum = 0.0;
        std::size_t hinge_evals = 0, hinge_active = 0;

        for (std::size_t start = 0; start < n; start += config.batch_size) {
            const std::size_t stop = std::min(n, start + config.batch_size);
            Graph g;
            const Graph::NodeId mask_leaf = g.input(mask, true);

            Graph::NodeId batch_acc = -1;
            for (std::size_t s = start; s < stop; ++s) {
                const ImageLossNodes nodes =
                    image_loss_nodes(g, *seen[order[s]], mask_leaf, team, config.omega, lambda);
                loss_sum += g.value(nodes.total).item();
                for (Graph::NodeId d : nodes.distances) dist_sum += g.value(d).item();
                ++hinge_evals;
                if (g.value(nodes.hinge).item() > 0.0) ++hinge_active;
                batch_acc = batch_acc < 0 ? nodes.total : g.add(batch_acc, nodes.total);
            }
            const Graph::NodeId batch_mean =
                g.div(batch_acc, g.constant_scalar(static_cast<double>(stop - start)));
            if (!std::isfinite(g.value(batch_mean).item())) {
                throw std::runtime_error("mask training for identity " + identity +
                                         " produced a non-finite loss at epoch " +
                                         std::to_string(epoch) + ", batch " +
                                         std::to_string(start / config.batch_size));
            }
            g.backward(batch_mean);

            const Tensor& grad = g.grad(mask_leaf);
            for (std::size_t j = 0; j < mask.data().size(); ++j) {
                const double gj = grad.data()[j];
                const double step =
                    gj > 0.0 ? config.eta : gj < 0.0 ? -config.eta : 0.0;   // sign(0) = 0
                double v = mask.data()[j] - step;
                v = std::min(config.epsilon, std::max(-config.epsilon, v));
                mask.data()[j] = v;
            }
        }

        const double active_fraction =
            hinge_evals == 0 ? 0.0
                             : static_cast<double>(hinge_active) / static_cast<double>(hinge_evals);
        if (trace != nullptr) {
            trace->push_back({loss_sum / static_cast<double>(n),
                              dist_sum / static_cast<double>(n * team.size()), active_fraction,
                              lambda});
        }
        lambda = schedule_lambda(lambda, active_fraction, config);
    }

    P3Mask out;
    out.values = chw_to_image(mask);
    out.epsilon = config.epsilon;
    out.owner_id = identity;
    out.creation_seed = config.seed;
    out.validate();
    return out;
}

} // namespace p3mask
