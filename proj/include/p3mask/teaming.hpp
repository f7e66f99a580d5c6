#pragma once

// Ensemble selection by failure decorrelation. Each candidate model gets a
// failure profile — the set of validation images it misidentifies — and teams
// are scored by how little their members' failures overlap. Decorrelated
// teams cover more of the embedding space, which is what makes a mask trained
// against them transfer to models outside the team.

#include <cstddef>
#include <string>
#include <vector>

#include "p3mask/frcore.hpp"
#include "p3mask/synthdata.hpp"

namespace p3mask {

struct FailureProfile {
    std::string model_id;
    std::vector<int> failed;    // sorted, unique indices into the validation list
    int validation_size = 0;
};

/// Validation images for failure profiling: probes plus gallery-unseen
/// images, in manifest order. Gallery-seen images are excluded — they back
/// the identification gallery, so failures on them would measure storage, not
/// generalization.
std::vector<const LabeledImage*> validation_images(const std::vector<LabeledImage>& images);

/// A deliberately sparse identification gallery for profiling: the first
/// gallery-seen image of each identity, in manifest order. One exemplar per
/// identity keeps the task hard enough that models disagree; with every seen
/// image enrolled, small pools stop failing at all and every profile is empty.
std::vector<const LabeledImage*> profiling_gallery_images(const std::vector<LabeledImage>& images);

/// Runs the model over every validation image against `gallery` and records
/// the indices it misidentifies. Deterministic. Throws if `validation` is
/// empty or contains a null entry.
FailureProfile negative_samples(const EmbeddingModel& model,
                                const std::vector<const LabeledImage*>& validation,
                                const Gallery& gallery);

struct LambdaFocal {
    double value = 0.0;         // in [0, 1]
    bool never_fails = false;   // focal profile empty; value pinned to 0
};

/// Failure correlation of team[focal] with the rest of the team, in [0, 1].
/// Over the focal model's failures, count how many of the other S-1 members
/// fail alongside it: 0 means the others never share its failures, 1 means
/// they always all do. A focal model with no failures scores 0 and sets
/// `never_fails`.
LambdaFocal lambda_focal(const std::vector<const FailureProfile*>& team, std::size_t focal);

struct DiversityReport {
    std::vector<std::string> team;   // member ids, sorted ascending
    std::vector<double> lambdas;     // per-focal correlation, aligned with `team`
    double d_focal = 0.0;            // mean of (1 - lambda), in [0, 1]
    bool warning = false;            // some member never fails on validation
};

/// Scores a team: each member takes a turn as the focal model and the team's
/// diversity is the mean decorrelation across those turns. Independent of the
/// order the members are passed in. Requires size >= 2, distinct ids and a
/// common validation size.
DiversityReport focal_diversity(const std::vector<const FailureProfile*>& team);

/// Exhaustively scores every size-`team_size` subset of `pool` and returns
/// the highest-d_focal report; ties resolve to the lexicographically smallest
/// sorted id list.
DiversityReport select_team(const std::vector<FailureProfile>& pool, int team_size);

/// Every candidate team, best first (d_focal descending, then id list
/// ascending). select_team(pool, s) equals rank_teams(pool, s).front().
std::vector<DiversityReport> rank_teams(const std::vector<FailureProfile>& pool, int team_size);

/// Plain-text ranking, one line per team, byte-deterministic for diffing.
std::string format_team_ranking(const std::vector<DiversityReport>& reports);

} // namespace p3mask
