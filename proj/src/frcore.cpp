#include "p3mask/frcore.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <sstream>
#include <stdexcept>

#include "p3mask/binio.hpp"

namespace p3mask {

namespace {

constexpr char kModelMagic[4] = {'P', '3', 'F', 'M'};
constexpr std::uint16_t kModelVersion = 1;

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == sep) {
            out.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    out.push_back(cur);
    return out;
}

int parse_int(const std::string& tok, const std::string& context) {
    if (tok.empty() || tok.size() > 6 ||
        !std::all_of(tok.begin(), tok.end(), [](char c) { return c >= '0' && c <= '9'; })) {
        throw std::invalid_argument("architecture descriptor: bad integer '" + tok + "' in '" +
                                    context + "'");
    }
    return std::stoi(tok);
}

[[noreturn]] void bad_token(const std::string& tok) {
    throw std::invalid_argument("architecture descriptor: unrecognized layer '" + tok + "'");
}

} // namespace

Architecture Architecture::parse(const std::string& descriptor) {
    Architecture arch;
    const std::vector<std::string> tokens = split(descriptor, ';');
    if (tokens.empty() || tokens.front().rfind("in:", 0) != 0) {
        throw std::invalid_argument("architecture descriptor must start with in:<size>x<channels>");
    }
    {
        const std::vector<std::string> dims = split(tokens.front().substr(3), 'x');
        if (dims.size() != 2) bad_token(tokens.front());
        arch.input_size = parse_int(dims[0], tokens.front());
        arch.input_channels = parse_int(dims[1], tokens.front());
    }
    if (arch.input_channels != 1 && arch.input_channels != 3) {
        throw std::invalid_argument("architecture descriptor: input channels must be 1 or 3");
    }
    if (arch.input_size < 1) {
        throw std::invalid_argument("architecture descriptor: input size must be positive");
    }

    for (std::size_t i = 1; i < tokens.size(); ++i) {
        const std::string& tok = tokens[i];
        Layer layer;
        if (tok.rfind("conv:", 0) == 0) {
            const std::vector<std::string> parts = split(tok.substr(5), 'x');
            if (parts.size() != 3) bad_token(tok);
            layer.kind = Layer::Kind::Conv;
            layer.kernel = parse_int(parts[0], tok);
            layer.channels = parse_int(parts[1], tok);
            layer.stride = parse_int(parts[2], tok);
            if (layer.kernel < 1 || layer.channels < 1 || layer.stride < 1) bad_token(tok);
        } else if (tok == "relu") {
            layer.kind = Layer::Kind::Relu;
        } else if (tok == "gap") {
            layer.kind = Layer::Kind::Gap;
        } else if (tok.rfind("dense:", 0) == 0) {
            layer.kind = Layer::Kind::Dense;
            layer.out_dim = parse_int(tok.substr(6), tok);
            if (layer.out_dim < 1) bad_token(tok);
        } else {
            bad_token(tok);
        }
        arch.layers.push_back(layer);
    }

    // Shape walk: every layer must be applicable, and the network must end in
    // a dense layer so the embedding is a learned projection of pooled
    // features.
    bool spatial = true;
    int hw = arch.input_size;
    for (const Layer& layer : arch.layers) {
        switch (layer.kind) {
        case Layer::Kind::Conv:
            if (!spatial) {
                throw std::invalid_argument("architecture descriptor: conv after gap");
            }
            if (hw < layer.kernel) {
                throw std::invalid_argument("architecture descriptor: conv kernel " +
                                            std::to_string(layer.kernel) + " exceeds feature size " +
                                            std::to_string(hw));
            }
            hw = (hw - layer.kernel) / layer.stride + 1;
            break;
        case Layer::Kind::Relu:
            break;
        case Layer::Kind::Gap:
            if (!spatial) {
                throw std::invalid_argument("architecture descriptor: gap after gap");
            }
            spatial = false;
            break;
        case Layer::Kind::Dense:
            if (spatial) {
                throw std::invalid_argument("architecture descriptor: dense requires gap first");
            }
            break;
        }
    }
    if (arch.layers.empty() || arch.layers.back().kind != Layer::Kind::Dense) {
        throw std::invalid_argument("architecture descriptor must end with a dense layer");
    }
    return arch;
}

std::string Architecture::descriptor() const {
    std::ostringstream out;
    out << "in:" << input_size << "x" << input_channels;
    for (const Layer& layer : layers) {
        switch (layer.kind) {
        case Layer::Kind::Conv:
            out << ";conv:" << layer.kernel << "x" << layer.channels << "x" << layer.stride;
            break;
        case Layer::Kind::Relu:
            out << ";relu";
            break;
        case Layer::Kind::Gap:
            out << ";gap";
            break;
        case Layer::Kind::Dense:
            out << ";dense:" << layer.out_dim;
            break;
        }
    }
    return out.str();
}

int Architecture::embedding_dim() const {
    if (layers.empty() || layers.back().kind != Layer::Kind::Dense) {
        throw std::logic_error("architecture does not end in a dense layer");
    }
    return layers.back().out_dim;
}

std::vector<std::vector<int>> Architecture::param_shapes() const {
    std::vector<std::vector<int>> shapes;
    int c = input_channels;
    for (const Layer& layer : layers) {
        switch (layer.kind) {
        case Layer::Kind::Conv:
            shapes.push_back({layer.channels, c, layer.kernel, layer.kernel});
            shapes.push_back({layer.channels});
            c = layer.channels;
            break;
        case Layer::Kind::Dense:
            shapes.push_back({c, layer.out_dim});
            shapes.push_back({layer.out_dim});
            c = layer.out_dim;
            break;
        case Layer::Kind::Relu:
        case Layer::Kind::Gap:
            break;
        }
    }
    return shapes;
}

std::vector<Tensor> Architecture::init_params(Rng& rng) const {
    std::vector<Tensor> params;
    for (const std::vector<int>& shape : param_shapes()) {
        Tensor t(shape);
        if (shape.size() > 1) {
            // Weight tensor: conv [out,in,k,k] or dense [in,out]. Uniform
            // He-style init with bound sqrt(6 / fan_in); biases stay zero.
            std::size_t fan_in = 1;
            if (shape.size() == 4) {
                fan_in = static_cast<std::size_t>(shape[1]) * shape[2] * shape[3];
            } else {
                fan_in = static_cast<std::size_t>(shape[0]);
            }
            const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
            for (double& v : t.data()) v = rng.uniform(-bound, bound);
        }
        params.push_back(std::move(t));
    }
    return params;
}

Graph::NodeId Architecture::forward(Graph& g, Graph::NodeId input,
                                    const std::vector<Graph::NodeId>& params) const {
    if (params.size() != param_shapes().size()) {
        throw std::invalid_argument("architecture forward: expected " +
                                    std::to_string(param_shapes().size()) + " parameter nodes, got " +
                                    std::to_string(params.size()));
    }
    // Center the nominal [0, 1] pixel range to [-0.5, 0.5]; all-positive
    // inputs give the first conv layer strongly correlated gradients and make
    // plain SGD noticeably less stable.
    Graph::NodeId x = g.sub(input, g.constant_scalar(0.5));
    std::size_t p = 0;
    for (const Layer& layer : layers) {
        switch (layer.kind) {
        case Layer::Kind::Conv: {
            const Graph::NodeId w = params[p++];
            const Graph::NodeId b = params[p++];
            x = g.add(g.conv2d(x, w, layer.stride), b);
            break;
        }
        case Layer::Kind::Relu:
            x = g.relu(x);
            break;
        case Layer::Kind::Gap:
            x = g.spatial_mean(x);
            break;
        case Layer::Kind::Dense: {
            const Graph::NodeId w = params[p++];
            const Graph::NodeId b = params[p++];
            x = g.add(g.matmul(x, w), b);
            break;
        }
        }
    }
    return x;
}

std::vector<Graph::NodeId> EmbeddingModel::insert_params(Graph& g, bool requires_grad) const {
    std::vector<Graph::NodeId> ids;
    ids.reserve(params.size());
    for (const Tensor& t : params) ids.push_back(g.input(t, requires_grad));
    return ids;
}

Tensor EmbeddingModel::embed(const Image& face) const {
    if (face.channels() != arch.input_channels) {
        throw std::invalid_argument("model " + id + " expects " +
                                    std::to_string(arch.input_channels) + "-channel input, got " +
                                    std::to_string(face.channels()));
    }
    const Image resized = resize_bilinear(face, arch.input_size, arch.input_size);
    Graph g;
    const Graph::NodeId x = g.constant(image_to_chw(resized));
    const Graph::NodeId emb = g.l2_normalize(arch.forward(g, x, insert_params(g, false)));
    Tensor out = g.value(emb);
    double nrm = 0.0;
    for (double v : out.data()) nrm += v * v;
    if (std::fabs(std::sqrt(nrm) - 1.0) > 1e-9) {
        throw std::runtime_error("model " + id + " produced a degenerate (zero) embedding");
    }
    return out;
}

double arccos_dist(const Tensor& a, const Tensor& b) {
    if (a.shape().size() != 1 || b.shape().size() != 1 || a.shape() != b.shape()) {
        throw std::invalid_argument("arccos_dist requires rank-1 tensors of equal length");
    }
    double na = 0.0, nb = 0.0, d = 0.0;
    for (std::size_t i = 0; i < a.data().size(); ++i) {
        na += a.data()[i] * a.data()[i];
        nb += b.data()[i] * b.data()[i];
        d += a.data()[i] * b.data()[i];
    }
    if (std::fabs(std::sqrt(na) - 1.0) > 1e-6 || std::fabs(std::sqrt(nb) - 1.0) > 1e-6) {
        throw std::invalid_argument("arccos_dist requires unit-norm embeddings");
    }
    // Same clamp convention as the graph arccos op, so scalar and graph
    // distances agree bit-for-bit.
    const double lim = 1.0 - 1e-7;
    return std::acos(std::min(lim, std::max(-lim, d)));
}

Gallery build_gallery(const EmbeddingModel& model,
                      const std::vector<const LabeledImage*>& images) {
    Gallery gal;
    gal.entries.reserve(images.size());
    for (const LabeledImage* img : images) {
        gal.entries.push_back({img->identity, img->role, model.embed(img->image)});
    }
    return gal;
}

int fr_identify_index(const Tensor& probe_embedding, const Gallery& gallery) {
    if (gallery.entries.empty()) {
        throw std::invalid_argument("cannot identify against an empty gallery");
    }
    int best = 0;
    double best_d = arccos_dist(probe_embedding, gallery.entries[0].embedding);
    for (std::size_t i = 1; i < gallery.entries.size(); ++i) {
        const double d = arccos_dist(probe_embedding, gallery.entries[i].embedding);
        if (d < best_d) {   // strict: ties keep the lowest index
            best_d = d;
            best = static_cast<int>(i);
        }
    }
    return best;
}

std::string fr_identify(const EmbeddingModel& model, const Image& probe,
                        const Gallery& gallery) {
    return gallery.entries[static_cast<std::size_t>(fr_identify_index(model.embed(probe), gallery))]
        .identity;
}

double fr_accuracy(const EmbeddingModel& model,
                   const std::vector<const LabeledImage*>& probes, const Gallery& gallery) {
    if (probes.empty()) throw std::invalid_argument("fr_accuracy: no probe images");
    int correct = 0;
    for (const LabeledImage* p : probes) {
        if (fr_identify(model, p->image, gallery) == p->identity) ++correct;
    }
    return 100.0 * static_cast<double>(correct) / static_cast<double>(probes.size());
}

std::vector<PoolModelSpec> default_pool_specs(int image_size, int channels) {
    std::ostringstream a, b;
    a << "in:" << image_size << "x" << channels << ";conv:3x8x2;relu;conv:3x16x2;relu;gap;dense:32";
    b << "in:" << image_size << "x" << channels << ";conv:5x6x2;relu;conv:3x12x1;relu;gap;dense:32";
    const std::string arch_a = a.str(), arch_b = b.str();
    // Validate both against the requested geometry before handing them out.
    Architecture::parse(arch_a);
    Architecture::parse(arch_b);
    return {
        {"convA-s11", arch_a, 11, 1.00}, {"convA-s23", arch_a, 23, 0.80},
        {"convA-s37", arch_a, 37, 0.65}, {"convB-s13", arch_b, 13, 1.00},
        {"convB-s29", arch_b, 29, 0.80}, {"convB-s41", arch_b, 41, 0.65},
    };
}

EmbeddingModel train_pool_model(const DatasetManifest& manifest,
                                const std::vector<LabeledImage>& images,
                                const PoolModelSpec& spec, const PoolTrainConfig& config) {
    if (config.epochs < 0 || config.batch_size < 1 || !(config.learning_rate > 0.0) ||
        config.momentum < 0.0 || config.momentum >= 1.0) {
        throw std::invalid_argument(
            "pool training config invalid (epochs >= 0, batch >= 1, lr > 0, momentum in [0, 1))");
    }
    if (!(spec.subset_fraction > 0.5) || spec.subset_fraction > 1.0) {
        throw std::invalid_argument("pool model subset fraction must be in (0.5, 1]");
    }
    const Architecture arch = Architecture::parse(spec.arch);
    const std::vector<std::string> classes = manifest.identity_ids();
    if (classes.size() < 2) {
        throw std::invalid_argument("pool training needs at least 2 identities");
    }
    std::map<std::string, int> class_index;
    for (std::size_t i = 0; i < classes.size(); ++i) class_index[classes[i]] = static_cast<int>(i);

    // Gallery-seen images of each identity, in manifest order.
    std::map<std::string, std::vector<std::size_t>> seen_by_identity;
    for (std::size_t i = 0; i < images.size(); ++i) {
        if (images[i].role == kRoleGallerySeen) seen_by_identity[images[i].identity].push_back(i);
    }

    EmbeddingModel model;
    model.id = spec.id;
    model.arch = arch;
    model.train_seed = derive_seed(config.seed, "pool-model", spec.seed_tag);
    Rng rng(model.train_seed);

    model.params = arch.init_params(rng);
    const int embed_dim = arch.embedding_dim();
    const int n_classes = static_cast<int>(classes.size());
    Tensor head_w({embed_dim, n_classes});
    Tensor head_b({n_classes});
    {
        const double bound = std::sqrt(6.0 / static_cast<double>(embed_dim));
        for (double& v : head_w.data()) v = rng.uniform(-bound, bound);
    }

    // Per-identity training subset: a seeded draw of round(fraction * n)
    // images (at least one), so sibling pool models see overlapping but
    // distinct slices of the same data.
    std::vector<Tensor> xs;
    std::vector<int> labels;
    for (const std::string& identity : classes) {
        const auto it = seen_by_identity.find(identity);
        if (it == seen_by_identity.end()) {
            throw std::invalid_argument("identity " + identity + " has no gallery-seen images");
        }
        std::vector<std::size_t> pick = it->second;
        const int n = static_cast<int>(pick.size());
        const int k = std::max(1, static_cast<int>(std::lround(spec.subset_fraction * n)));
        rng.shuffle(pick);
        pick.resize(static_cast<std::size_t>(std::min(k, n)));
        std::sort(pick.begin(), pick.end());
        for (std::size_t idx : pick) {
            const Image face = resize_bilinear(face_crop(images[idx].image), arch.input_size,
                                               arch.input_size);
            xs.push_back(image_to_chw(face));
            labels.push_back(class_index[identity]);
        }
    }

    const std::size_t n_samples = xs.size();
    std::vector<std::size_t> order(n_samples);
    for (std::size_t i = 0; i < n_samples; ++i) order[i] = i;

    const std::size_t n_model_params = model.params.size();
    std::vector<Tensor> velocity;
    for (const Tensor& t : model.params) velocity.push_back(Tensor(t.shape()));
    velocity.push_back(Tensor(head_w.shape()));
    velocity.push_back(Tensor(head_b.shape()));

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        rng.shuffle(order);
        for (std::size_t start = 0; start < n_samples; start += config.batch_size) {
            const std::size_t stop = std::min(n_samples, start + config.batch_size);

            std::vector<Tensor> grads;
            for (const Tensor& t : model.params) grads.push_back(Tensor(t.shape()));
            grads.push_back(Tensor(head_w.shape()));
            grads.push_back(Tensor(head_b.shape()));

            for (std::size_t s = start; s < stop; ++s) {
                Graph g;
                std::vector<Graph::NodeId> pn = model.insert_params(g, true);
                const Graph::NodeId hw = g.input(head_w, true);
                const Graph::NodeId hb = g.input(head_b, true);
                const Graph::NodeId feats =
                    arch.forward(g, g.constant(xs[order[s]]), pn);
                const Graph::NodeId logits = g.add(g.matmul(feats, hw), hb);
                const Graph::NodeId loss = g.softmax_cross_entropy(logits, labels[order[s]]);
                if (!std::isfinite(g.value(loss).item())) {
                    throw std::runtime_error("pool model " + spec.id + " diverged at epoch " +
                                             std::to_string(epoch));
                }
                g.backward(loss);
                for (std::size_t p = 0; p < n_model_params; ++p) {
                    const Tensor& gp = g.grad(pn[p]);
                    for (std::size_t j = 0; j < gp.data().size(); ++j)
                        grads[p].data()[j] += gp.data()[j];
                }
                for (std::size_t j = 0; j < head_w.data().size(); ++j)
                    grads[n_model_params].data()[j] += g.grad(hw).data()[j];
                for (std::size_t j = 0; j < head_b.data().size(); ++j)
                    grads[n_model_params + 1].data()[j] += g.grad(hb).data()[j];
            }

            // Mean gradient over the batch, globally norm-clipped, then a
            // momentum step. Everything is plain double arithmetic in a fixed
            // order, so training is bit-reproducible.
            const double inv_batch = 1.0 / static_cast<double>(stop - start);
            double sq_norm = 0.0;
            for (Tensor& t : grads) {
                for (double& v : t.data()) {
                    v *= inv_batch;
                    sq_norm += v * v;
                }
            }
            if (config.clip_norm > 0.0) {
                const double norm = std::sqrt(sq_norm);
                if (norm > config.clip_norm) {
                    const double shrink = config.clip_norm / norm;
                    for (Tensor& t : grads)
                        for (double& v : t.data()) v *= shrink;
                }
            }
            for (std::size_t p = 0; p < grads.size(); ++p) {
                Tensor& target = p < n_model_params ? model.params[p]
                                 : p == n_model_params ? head_w
                                                       : head_b;
                for (std::size_t j = 0; j < target.data().size(); ++j) {
                    double& vel = velocity[p].data()[j];
                    vel = config.momentum * vel + grads[p].data()[j];
                    target.data()[j] -= config.learning_rate * vel;
                }
            }
        }
    }

    // Accuracy of the classifier head on its own training subset; the head is
    // discarded but the number is recorded as a training sanity signal.
    int correct = 0;
    for (std::size_t s = 0; s < n_samples; ++s) {
        Graph g;
        const Graph::NodeId feats =
            arch.forward(g, g.constant(xs[s]), model.insert_params(g, false));
        const Graph::NodeId logits =
            g.add(g.matmul(feats, g.constant(head_w)), g.constant(head_b));
        const Tensor& lv = g.value(logits);
        int best = 0;
        for (std::size_t j = 1; j < lv.data().size(); ++j)
            if (lv.data()[j] > lv.data()[best]) best = static_cast<int>(j);
        if (best == labels[s]) ++correct;
    }
    model.train_accuracy =
        n_samples == 0 ? 0.0 : 100.0 * static_cast<double>(correct) / static_cast<double>(n_samples);
    return model;
}

void model_save(const EmbeddingModel& model, const std::string& path) {
    ByteWriter w;
    w.bytes(kModelMagic, 4);
    w.u16(kModelVersion);
    w.str(model.arch.descriptor());
    w.str(model.id);
    w.u64(model.train_seed);
    w.f64(model.train_accuracy);
    w.u32(static_cast<std::uint32_t>(model.params.size()));
    for (const Tensor& t : model.params) {
        w.u8(static_cast<std::uint8_t>(t.shape().size()));
        for (int d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
        for (double v : t.data()) w.f64(v);
    }
    w.u32(crc32(w.data()));
    write_file_bytes(path, w.data());
}

EmbeddingModel model_load(const std::string& path) {
    const std::vector<std::uint8_t> bytes = read_file_bytes(path);
    if (bytes.size() < 8) throw std::runtime_error(path + ": not a model checkpoint (too short)");
    const std::uint32_t stored = static_cast<std::uint32_t>(bytes[bytes.size() - 4]) |
                                 (static_cast<std::uint32_t>(bytes[bytes.size() - 3]) << 8) |
                                 (static_cast<std::uint32_t>(bytes[bytes.size() - 2]) << 16) |
                                 (static_cast<std::uint32_t>(bytes[bytes.size() - 1]) << 24);
    if (crc32(bytes.data(), bytes.size() - 4) != stored) {
        throw std::runtime_error(path + ": model checkpoint CRC mismatch");
    }
    ByteReader r(bytes.data(), bytes.size() - 4);
    char magic[4];
    magic[0] = static_cast<char>(r.u8());
    magic[1] = static_cast<char>(r.u8());
    magic[2] = static_cast<char>(r.u8());
    magic[3] = static_cast<char>(r.u8());
    if (std::memcmp(magic, kModelMagic, 4) != 0) {
        throw std::runtime_error(path + ": not a model checkpoint (bad magic)");
    }
    const std::uint16_t version = r.u16();
    if (version != kModelVersion) {
        throw std::runtime_error(path + ": unsupported model checkpoint version " +
                                 std::to_string(version));
    }
    EmbeddingModel model;
    model.arch = Architecture::parse(r.str());
    model.id = r.str();
    model.train_seed = r.u64();
    model.train_accuracy = r.f64();
    const std::uint32_t n_params = r.u32();
    const std::vector<std::vector<int>> expected = model.arch.param_shapes();
    if (n_params != expected.size()) {
        throw std::runtime_error(path + ": parameter count does not match architecture");
    }
    for (std::uint32_t p = 0; p < n_params; ++p) {
        const int rank = r.u8();
        std::vector<int> shape;
        for (int d = 0; d < rank; ++d) {
            const std::uint32_t dim = r.u32();
            if (dim == 0 || dim > (1u << 20)) {
                throw std::runtime_error(path + ": parameter dimension out of range");
            }
            shape.push_back(static_cast<int>(dim));
        }
        if (shape != expected[p]) {
            throw std::runtime_error(path + ": parameter " + std::to_string(p) +
                                     " shape does not match architecture");
        }
        Tensor t(shape);
        for (double& v : t.data()) v = r.f64();
        model.params.push_back(std::move(t));
    }
    if (r.remaining() != 0) {
        throw std::runtime_error(path + ": trailing bytes in model checkpoint");
    }
    return model;
}

} // namespace p3mask
