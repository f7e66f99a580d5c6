#pragma once

// Test-only reference implementations, written independently of the library
// code paths they validate. These are deliberately structured differently
// (covariance-form SSIM, per-sample counting for diversity, direct central
// differences) so agreement is evidence rather than tautology.

#include <algorithm>
#include <cmath>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "p3mask/image.hpp"
#include "p3mask/tensor.hpp"

namespace oracle {

/// Reference SSIM: 11x11 Gaussian window (sigma 1.5), valid positions,
/// covariance accumulated by subtracting window means explicitly, channels
/// averaged. Falls back to whole-image statistics for small images.
inline double ssim_reference(const p3mask::Image& a, const p3mask::Image& b) {
    constexpr double c1 = 0.0001;   // (0.01 * dynamic_range)^2
    constexpr double c2 = 0.0009;   // (0.03 * dynamic_range)^2
    const int win = 11;
    const double sigma = 1.5;

    const int h = a.height(), w = a.width(), chans = a.channels();

    std::vector<double> wt(static_cast<std::size_t>(win) * win);
    {
        double s = 0.0;
        for (int p = 0; p < win; ++p) {
            for (int q = 0; q < win; ++q) {
                const double dy = p - (win - 1) / 2.0;
                const double dx = q - (win - 1) / 2.0;
                wt[static_cast<std::size_t>(p * win + q)] =
                    std::exp(-(dy * dy + dx * dx) / (2.0 * sigma * sigma));
                s += wt[static_cast<std::size_t>(p * win + q)];
            }
        }
        for (double& v : wt) v /= s;
    }

    const auto score = [&](double ma, double mb, double va, double vb, double cab) {
        return ((2.0 * ma * mb + c1) * (2.0 * cab + c2)) /
               ((ma * ma + mb * mb + c1) * (va + vb + c2));
    };

    double total = 0.0;
    long count = 0;
    if (std::min(h, w) >= win) {
        for (int ch = 0; ch < chans; ++ch) {
            for (int y = 0; y + win <= h; ++y) {
                for (int x = 0; x + win <= w; ++x) {
                    double ma = 0.0, mb = 0.0;
                    for (int p = 0; p < win; ++p) {
                        for (int q = 0; q < win; ++q) {
                            const double wv = wt[static_cast<std::size_t>(p * win + q)];
                            ma += wv * a.pixel(y + p, x + q, ch);
                            mb += wv * b.pixel(y + p, x + q, ch);
                        }
                    }
                    double va = 0.0, vb = 0.0, cab = 0.0;
                    for (int p = 0; p < win; ++p) {
                        for (int q = 0; q < win; ++q) {
                            const double wv = wt[static_cast<std::size_t>(p * win + q)];
                            const double da = a.pixel(y + p, x + q, ch) - ma;
                            const double db = b.pixel(y + p, x + q, ch) - mb;
                            va += wv * da * da;
                            vb += wv * db * db;
                            cab += wv * da * db;
                        }
                    }
                    total += score(ma, mb, va, vb, cab);
                    ++count;
                }
            }
        }
    } else {
        for (int ch = 0; ch < chans; ++ch) {
            const double n = static_cast<double>(h) * w;
            double ma = 0.0, mb = 0.0;
            for (int y = 0; y < h; ++y) {
                for (int x = 0; x < w; ++x) {
                    ma += a.pixel(y, x, ch);
                    mb += b.pixel(y, x, ch);
                }
            }
            ma /= n;
            mb /= n;
            double va = 0.0, vb = 0.0, cab = 0.0;
            for (int y = 0; y < h; ++y) {
                for (int x = 0; x < w; ++x) {
                    const double da = a.pixel(y, x, ch) - ma;
                    const double db = b.pixel(y, x, ch) - mb;
                    va += da * da;
                    vb += db * db;
                    cab += da * db;
                }
            }
            total += score(ma, mb, va / n, vb / n, cab / n);
            ++count;
        }
    }
    return total / static_cast<double>(count);
}

/// Central finite differences of an arbitrary scalar function of a tensor.
inline p3mask::Tensor central_diff(const std::function<double(const p3mask::Tensor&)>& f,
                                   const p3mask::Tensor& point, double h) {
    p3mask::Tensor grad(point.shape());
    p3mask::Tensor p = point;
    for (std::size_t i = 0; i < point.size(); ++i) {
        p[i] = point[i] + h;
        const double fp = f(p);
        p[i] = point[i] - h;
        const double fm = f(p);
        p[i] = point[i];
        grad[i] = (fp - fm) / (2.0 * h);
    }
    return grad;
}

/// Brute-force team diversity: failure sets as std::set, co-failure counts
/// tallied per sample, lambda evaluated as a single division of exact integer
/// sums, d_focal averaged over members in sorted-id order.
struct ProfileRef {
    std::string model_id;
    std::set<int> failed;
};

inline double lambda_bruteforce(const ProfileRef& focal, const std::vector<ProfileRef>& others) {
    const int s = static_cast<int>(others.size()) + 1;
    if (focal.failed.empty()) return 0.0;
    std::vector<long> n(static_cast<std::size_t>(s), 0);
    for (int sample : focal.failed) {
        int co = 0;
        for (const ProfileRef& o : others) {
            if (o.failed.count(sample)) ++co;
        }
        ++n[static_cast<std::size_t>(co)];
    }
    if (s == 2) {
        return static_cast<double>(n[1]) / static_cast<double>(focal.failed.size());
    }
    long first = 0, second = 0;
    for (int i = 0; i < s; ++i) {
        first += static_cast<long>(i) * n[static_cast<std::size_t>(i)];
        second += static_cast<long>(i) * (i - 1) * n[static_cast<std::size_t>(i)];
    }
    if (first == 0) return 0.0;
    return static_cast<double>(second) / static_cast<double>((s - 2) * first);
}

inline double d_focal_bruteforce(std::vector<ProfileRef> team) {
    std::sort(team.begin(), team.end(),
              [](const ProfileRef& a, const ProfileRef& b) { return a.model_id < b.model_id; });
    double acc = 0.0;
    for (std::size_t i = 0; i < team.size(); ++i) {
        std::vector<ProfileRef> others;
        for (std::size_t j = 0; j < team.size(); ++j) {
            if (j != i) others.push_back(team[j]);
        }
        acc += 1.0 - lambda_bruteforce(team[i], others);
    }
    return acc / static_cast<double>(team.size());
}

/// All size-k index combinations of {0..n-1} in lexicographic order.
inline std::vector<std::vector<int>> combinations(int n, int k) {
    std::vector<std::vector<int>> out;
    std::vector<int> cur;
    const std::function<void(int)> rec = [&](int start) {
        if (static_cast<int>(cur.size()) == k) {
            out.push_back(cur);
            return;
        }
        for (int i = start; i < n; ++i) {
            cur.push_back(i);
            rec(i + 1);
            cur.pop_back();
        }
    };
    rec(0);
    return out;
}

} // namespace oracle
