#include "p3mask/teaming.hpp"

#include <algorithm>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace p3mask {

std::vector<const LabeledImage*> validation_images(const std::vector<LabeledImage>& images) {
    std::vector<const LabeledImage*> out;
    for (const LabeledImage& li : images) {
        if (li.role == kRoleProbe || li.role == kRoleGalleryUnseen) out.push_back(&li);
    }
    return out;
}

std::vector<const LabeledImage*> profiling_gallery_images(
    const std::vector<LabeledImage>& images) {
    std::vector<const LabeledImage*> out;
    std::vector<std::string> taken;
    for (const LabeledImage& li : images) {
        if (li.role != kRoleGallerySeen) continue;
        if (std::find(taken.begin(), taken.end(), li.identity) != taken.end()) continue;
        taken.push_back(li.identity);
        out.push_back(&li);
    }
    return out;
}

FailureProfile negative_samples(const EmbeddingModel& model,
                                const std::vector<const LabeledImage*>& validation,
                                const Gallery& gallery) {
    if (validation.empty()) {
        throw std::invalid_argument("negative_samples: validation set is empty");
    }
    FailureProfile profile;
    profile.model_id = model.id;
    profile.validation_size = static_cast<int>(validation.size());
    for (std::size_t i = 0; i < validation.size(); ++i) {
        const LabeledImage* li = validation[i];
        if (li == nullptr) {
            throw std::invalid_argument("negative_samples: validation set contains a null image");
        }
        if (fr_identify(model, li->image, gallery) != li->identity) {
            profile.failed.push_back(static_cast<int>(i));
        }
    }
    return profile;
}

namespace {

void check_team(const std::vector<const FailureProfile*>& team) {
    if (team.size() < 2) {
        throw std::invalid_argument("team must have at least 2 members, got " +
                                    std::to_string(team.size()));
    }
    for (const FailureProfile* p : team) {
        if (p == nullptr) throw std::invalid_argument("team contains a null profile");
        if (p->validation_size != team.front()->validation_size) {
            throw std::invalid_argument("profiles " + team.front()->model_id + " and " +
                                        p->model_id + " cover different validation sets");
        }
        for (std::size_t i = 1; i < p->failed.size(); ++i) {
            if (p->failed[i] <= p->failed[i - 1]) {
                throw std::invalid_argument("profile " + p->model_id +
                                            " has unsorted or duplicate failure indices");
            }
        }
        if (!p->failed.empty() &&
            (p->failed.front() < 0 || p->failed.back() >= p->validation_size)) {
            throw std::invalid_argument("profile " + p->model_id +
                                        " references images outside the validation set");
        }
    }
    for (std::size_t i = 0; i < team.size(); ++i) {
        for (std::size_t j = i + 1; j < team.size(); ++j) {
            if (team[i]->model_id == team[j]->model_id) {
                throw std::invalid_argument("duplicate model id in team: " + team[i]->model_id);
            }
        }
    }
}

} // namespace

LambdaFocal lambda_focal(const std::vector<const FailureProfile*>& team, std::size_t focal) {
    check_team(team);
    if (focal >= team.size()) {
        throw std::invalid_argument("focal index " + std::to_string(focal) +
                                    " out of range for a team of " + std::to_string(team.size()));
    }

    const FailureProfile& f = *team[focal];
    LambdaFocal out;
    if (f.failed.empty()) {
        out.never_fails = true;
        return out;   // value pinned to 0: the model gives the measure nothing to condition on
    }

    // n[i] = how many of the focal failures are shared by exactly i other
    // members. All downstream arithmetic stays in exact integers until the
    // single final division.
    const int s = static_cast<int>(team.size());
    std::vector<long> n(static_cast<std::size_t>(s), 0);
    for (int sample : f.failed) {
        int co = 0;
        for (std::size_t m = 0; m < team.size(); ++m) {
            if (m == focal) continue;
            if (std::binary_search(team[m]->failed.begin(), team[m]->failed.end(), sample)) ++co;
        }
        ++n[static_cast<std::size_t>(co)];
    }

    if (s == 2) {
        out.value = static_cast<double>(n[1]) / static_cast<double>(f.failed.size());
        return out;
    }
    // For s >= 3 the measure is a ratio of two co-failure moments; it reduces
    // to sum(i*(i-1)*n[i]) / ((s-2) * sum(i*n[i])), which is 0 when no other
    // member ever co-fails and 1 when every co-failing sample drags in all
    // s-1 others.
    long first = 0, second = 0;
    for (int i = 0; i < s; ++i) {
        first += static_cast<long>(i) * n[static_cast<std::size_t>(i)];
        second += static_cast<long>(i) * (i - 1) * n[static_cast<std::size_t>(i)];
    }
    if (first == 0) return out;
    out.value = static_cast<double>(second) / static_cast<double>((s - 2) * first);
    return out;
}

DiversityReport focal_diversity(const std::vector<const FailureProfile*>& team) {
    check_team(team);

    std::vector<std::size_t> order(team.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return team[a]->model_id < team[b]->model_id;
    });

    std::vector<const FailureProfile*> sorted;
    sorted.reserve(team.size());
    for (std::size_t idx : order) sorted.push_back(team[idx]);

    DiversityReport report;
    double acc = 0.0;
    for (std::size_t i = 0; i < sorted.size(); ++i) {
        const LambdaFocal lf = lambda_focal(sorted, i);
        report.team.push_back(sorted[i]->model_id);
        report.lambdas.push_back(lf.value);
        report.warning = report.warning || lf.never_fails;
        acc += 1.0 - lf.value;
    }
    report.d_focal = acc / static_cast<double>(sorted.size());
    return report;
}

namespace {

/// Ordering for ranked output: higher d_focal first, then the smaller sorted
/// id list. Strict-weak: equal scores and equal teams compare false both ways.
bool report_better(const DiversityReport& a, const DiversityReport& b) {
    if (a.d_focal != b.d_focal) return a.d_focal > b.d_focal;
    return a.team < b.team;
}

std::vector<DiversityReport> enumerate_teams(const std::vector<FailureProfile>& pool,
                                             int team_size) {
    const int n = static_cast<int>(pool.size());
    if (team_size < 2 || team_size > n) {
        throw std::invalid_argument("team size " + std::to_string(team_size) +
                                    " must be between 2 and the pool size " + std::to_string(n));
    }

    std::vector<const FailureProfile*> by_id;
    by_id.reserve(pool.size());
    for (const FailureProfile& p : pool) by_id.push_back(&p);
    std::sort(by_id.begin(), by_id.end(), [](const FailureProfile* a, const FailureProfile* b) {
        return a->model_id < b->model_id;
    });

    std::vector<DiversityReport> reports;
    std::vector<int> pick(static_cast<std::size_t>(team_size));
    for (int i = 0; i < team_size; ++i) pick[static_cast<std::size_t>(i)] = i;
    while (true) {
        std::vector<const FailureProfile*> team;
        team.reserve(pick.size());
        for (int idx : pick) team.push_back(by_id[static_cast<std::size_t>(idx)]);
        reports.push_back(focal_diversity(team));

        // advance to the next combination in lexicographic order
        int k = team_size - 1;
        while (k >= 0 && pick[static_cast<std::size_t>(k)] == n - team_size + k) --k;
        if (k < 0) break;
        ++pick[static_cast<std::size_t>(k)];
        for (int j = k + 1; j < team_size; ++j) {
            pick[static_cast<std::size_t>(j)] = pick[static_cast<std::size_t>(j - 1)] + 1;
        }
    }
    return reports;
}

} // namespace

DiversityReport select_team(const std::vector<FailureProfile>& pool, int team_size) {
    const std::vector<DiversityReport> reports = enumerate_teams(pool, team_size);
    const DiversityReport* best = &reports.front();
    for (const DiversityReport& r : reports) {
        if (report_better(r, *best)) best = &r;
    }
    return *best;
}

std::vector<DiversityReport> rank_teams(const std::vector<FailureProfile>& pool, int team_size) {
    std::vector<DiversityReport> reports = enumerate_teams(pool, team_size);
    std::stable_sort(reports.begin(), reports.end(), report_better);
    return reports;
}

std::string format_team_ranking(const std::vector<DiversityReport>& reports) {
    std::ostringstream out;
    out << std::fixed << std::setprecision(6);
    for (std::size_t i = 0; i < reports.size(); ++i) {
        const DiversityReport& r = reports[i];
        out << (i + 1) << ". d_focal=" << r.d_focal << " team=";
        for (std::size_t j = 0; j < r.team.size(); ++j) {
            if (j > 0) out << "+";
            out << r.team[j];
        }
        out << " lambda=";
        for (std::size_t j = 0; j < r.lambdas.size(); ++j) {
            if (j > 0) out << ",";
            out << r.lambdas[j];
        }
        if (r.warning) out << " warning=never-fails";
        out << "\n";
    }
    return out.str();
}

} // namespace p3mask
