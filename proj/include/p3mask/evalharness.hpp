#pragma once

// End-to-end protection experiments: how well masks block identification on
// known and unknown models, whether the owner's key restores accuracy while a
// stranger's does not, how the protection survives wash-out filtering, and a
// per-image optimization reference point.
//
// All scenarios share one protocol: probes stay clean (they model the
// intruder's own capture), the published gallery images of protected
// identities are masked, and every other identity acts as gallery noise.

#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "p3mask/frcore.hpp"
#include "p3mask/mask.hpp"
#include "p3mask/maskgen.hpp"
#include "p3mask/synthdata.hpp"

namespace p3mask {

/// Hard experiment gate. Thrown when a precondition that makes the reported
/// numbers meaningful fails: an inadequately trained pool model, or a wash-out
/// filter so strong it breaks recognition on clean images. Distinct from
/// std::invalid_argument (caller errors) so the CLI can exit differently.
class GateFailure : public std::runtime_error {
  public:
    explicit GateFailure(const std::string& message) : std::runtime_error(message) {}
};

/// One identification tally; accuracy and protection success rate always sum
/// to exactly 100.
struct EvalCell {
    int correct = 0;
    int total = 0;
    double accuracy() const;   // percent; throws on an empty cell
    double psr() const { return 100.0 - accuracy(); }
};

struct EvalRow {
    std::string label;             // identity id or an aggregate label
    std::vector<EvalCell> cells;   // aligned with EvalReport::model_columns
};

struct EvalSection {
    std::string scenario;
    std::vector<EvalRow> rows;
};

struct EvalReport {
    std::string title;
    std::uint64_t seed = 0;
    std::string config_hash;
    std::vector<std::string> model_columns;   // pool model ids, column order
    std::vector<bool> model_in_team;          // aligned; true = mask saw this model
    std::vector<EvalSection> sections;
    std::vector<std::string> notes;           // human-readable observations
    std::map<std::string, double> metrics;    // named scalars (ssim, saturation, ...)
    double runtime_seconds = 0.0;             // informational; never emitted
};

inline constexpr const char* kRowOverall = "overall";
inline constexpr const char* kRowOthers = "others";
inline constexpr const char* kRowProtected = "all-protected";

/// Minimum clean-gallery probe accuracy (percent) a pool model must reach
/// before its protection numbers mean anything.
inline constexpr double kPoolAccuracyGate = 90.0;

/// Minimum probe accuracy (percent) on a filtered clean gallery for a
/// wash-out filter strength to be admissible.
inline constexpr double kFilterAccuracyGate = 80.0;

/// Protection scenario: no-protection baseline section, then a protected
/// section where every mask owner's gallery images (seen and unseen alike)
/// are masked. Throws std::invalid_argument on unknown owners, duplicate
/// owners or team ids outside the pool; throws GateFailure when a pool model
/// misses the clean-gallery accuracy gate. Records mean/min SSIM between
/// clean and protected crops and the masking saturation incidence.
EvalReport run_protection_eval(const DatasetManifest& manifest,
                               const std::vector<LabeledImage>& images,
                               const std::vector<P3Mask>& masks,
                               const std::vector<EmbeddingModel>& pool,
                               const std::vector<std::string>& team_ids);

/// Key-restore scenario, four sections: no-protection, protected, unmasked
/// with the owner's key, unmasked with another owner's key (owners sorted,
/// each gets the next owner's mask). Needs at least 2 masks to source a wrong
/// key. Saturation incidence is recorded; with zero saturated pixels the
/// correctly-unmasked section equals the no-protection section exactly.
EvalReport run_unmask_eval(const DatasetManifest& manifest,
                           const std::vector<LabeledImage>& images,
                           const std::vector<P3Mask>& masks,
                           const std::vector<EmbeddingModel>& pool,
                           const std::vector<std::string>& team_ids);

struct FilterSpec {
    enum class Kind { None, Gaussian, Median, Jpeg };
    Kind kind = Kind::None;
    double param = 0.0;   // sigma / window size / quality
    std::string label() const;
    Image apply(const Image& img) const;
};

/// Wash-out scenario: per filter, the protected gallery images are filtered
/// before embedding and the protected-identity accuracy is re-measured.
/// Every filter must first pass the clean-gallery calibration gate
/// (GateFailure otherwise). A "filter:none" section reproduces the protected
/// section of run_protection_eval. Team-model PSR below half its unfiltered
/// value is noted as a soft flag, not a failure.
EvalReport run_adaptive_eval(const DatasetManifest& manifest,
                             const std::vector<LabeledImage>& images,
                             const std::vector<P3Mask>& masks,
                             const std::vector<EmbeddingModel>& pool,
                             const std::vector<std::string>& team_ids,
                             const std::vector<FilterSpec>& filters);

/// Step budget for the per-image reference: the same number of gradient
/// evaluations one image receives during mask training (epochs times batches
/// per epoch), capped at 200.
int per_image_steps(int seen_count, const MaskTrainConfig& config);

/// Per-image reference optimizer: the mask-training update applied to a
/// perturbation owned by this single image (native crop resolution, same
/// loss, same amplitude bound, sign steps). The perturbation starts from a
/// uniform draw inside the budget box — the usual projected-gradient random
/// start — because the zero start is an exact critical point of the distance
/// term. The draw is seeded from the config seed and the image content, so
/// each image owns a deterministic start of its own. The perceptual weight stays at the schedule floor, the
/// least pressure the shared trainer could settle at. Returns the image with
/// its crop protected; zero steps returns it unchanged. Used as an
/// upper-bound reference: optimizing for one image should beat the shared
/// mask on that image.
Image per_image_baseline(const Image& x, const std::vector<const EmbeddingModel*>& team,
                         const MaskTrainConfig& config, int steps);

enum class ReportFormat { TableText, Csv };

/// Renders a report deterministically: same report, same bytes. Accuracy and
/// PSR columns are printed to 2 decimals and always sum to 100 by
/// construction. runtime_seconds is deliberately not emitted.
std::string format_report(const EvalReport& report, ReportFormat format);

/// format_report to a file. Throws on an unwritable path.
void emit_report(const EvalReport& report, const std::string& path, ReportFormat format);

} // namespace p3mask
