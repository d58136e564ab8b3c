#include "anom/metrics.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <deque>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace anom {

double auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size() || scores.empty())
        throw ContractError("auroc: scores and labels must align and be non-empty");
    size_t n = scores.size();
    size_t pos = 0;
    for (int l : labels) pos += l != 0;
    size_t neg = n - pos;
    if (pos == 0 || neg == 0) throw MetricError("auroc undefined: labels contain a single class");

    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return scores[a] < scores[b]; });

    // rank-average ties, then the Mann-Whitney statistic
    double pos_rank_sum = 0;
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
        double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
        for (size_t k = i; k <= j; ++k)
            if (labels[order[k]] != 0) pos_rank_sum += avg_rank;
        i = j + 1;
    }
    double u = pos_rank_sum - 0.5 * static_cast<double>(pos) * (static_cast<double>(pos) + 1.0);
    return u / (static_cast<double>(pos) * static_cast<double>(neg));
}

Labeling connected_components(const TensorF& mask) {
    const Shape& s = mask.shape();
    int h, w;
    if (s.size() == 2) {
        h = s[0];
        w = s[1];
    } else if (s.size() == 3 && s[0] == 1) {
        h = s[1];
        w = s[2];
    } else {
        throw ShapeError("connected_components expects (H,W) or (1,H,W)");
    }
    Labeling out;
    out.height = h;
    out.width = w;
    out.labels.assign(static_cast<size_t>(h) * w, 0);

    std::deque<std::pair<int, int>> queue;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            size_t i = static_cast<size_t>(y) * w + x;
            if (mask[i] == 0.0f || out.labels[i] != 0) continue;
            int id = ++out.count;
            out.labels[i] = id;
            queue.push_back({y, x});
            while (!queue.empty()) {
                auto [cy, cx] = queue.front();
                queue.pop_front();
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        int ny = cy + dy, nx = cx + dx;
                        if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
                        size_t j = static_cast<size_t>(ny) * w + nx;
                        if (mask[j] != 0.0f && out.labels[j] == 0) {
                            out.labels[j] = id;
                            queue.push_back({ny, nx});
                        }
                    }
            }
        }
    return out;
}

namespace {

const float* map_data(const TensorF& m, int& h, int& w) {
    const Shape& s = m.shape();
    if (s.size() == 2) {
        h = s[0];
        w = s[1];
    } else if (s.size() == 3 && s[0] == 1) {
        h = s[1];
        w = s[2];
    } else {
        throw ShapeError("score map must be (H,W) or (1,H,W)");
    }
    return m.data().data();
}

}  // namespace

double pro(const std::vector<TensorF>& score_maps, const std::vector<TensorF>& gt_masks,
           double fpr_limit) {
    if (score_maps.empty() || score_maps.size() != gt_masks.size())
        throw ContractError("pro: maps and masks must align and be non-empty");
    if (fpr_limit <= 0.0 || fpr_limit > 1.0) throw ContractError("pro: fpr limit outside (0,1]");

    struct Pixel {
        float score;
        int region;  // global region id, 0 = negative pixel
    };
    std::vector<Pixel> pixels;
    std::vector<size_t> region_size;  // index = global id - 1
    size_t negatives = 0;

    for (size_t n = 0; n < score_maps.size(); ++n) {
        int h = 0, w = 0;
        const float* sm = map_data(score_maps[n], h, w);
        int mh = 0, mw = 0;
        map_data(gt_masks[n], mh, mw);
        if (mh != h || mw != w) throw ShapeError("pro: mask resolution mismatch");
        Labeling lab = connected_components(gt_masks[n]);
        int base = static_cast<int>(region_size.size());
        for (int r = 0; r < lab.count; ++r) region_size.push_back(0);
        for (size_t i = 0; i < lab.labels.size(); ++i) {
            int g = lab.labels[i] == 0 ? 0 : base + lab.labels[i];
            pixels.push_back({sm[i], g});
            if (g == 0)
                ++negatives;
            else
                ++region_size[static_cast<size_t>(g - 1)];
        }
    }
    if (region_size.empty()) throw MetricError("pro undefined: no ground-truth regions");
    if (negatives == 0) throw MetricError("pro undefined: no negative pixels");

    std::sort(pixels.begin(), pixels.end(),
              [](const Pixel& a, const Pixel& b) { return a.score > b.score; });

    // choose thresholds: every distinct score while cheap, else 200 quantiles
    const size_t total = pixels.size();
    std::vector<float> thresholds;
    if (total <= (1u << 20)) {
        for (size_t i = 0; i < total; ++i)
            if (i == 0 || pixels[i].score != pixels[i - 1].score)
                thresholds.push_back(pixels[i].score);
    } else {
        for (int q = 0; q < 200; ++q) {
            size_t idx = static_cast<size_t>(
                static_cast<double>(q) * static_cast<double>(total - 1) / 199.0);
            float t = pixels[idx].score;
            if (thresholds.empty() || t != thresholds.back()) thresholds.push_back(t);
        }
    }

    // descending sweep: prediction = {score >= threshold}, updated incrementally
    std::vector<size_t> hit(region_size.size(), 0);
    size_t fp = 0;
    size_t cursor = 0;
    double prev_fpr = 0.0, prev_overlap = 0.0, area = 0.0;
    bool clipped = false;
    for (float t : thresholds) {
        while (cursor < total && pixels[cursor].score >= t) {
            if (pixels[cursor].region == 0)
                ++fp;
            else
                ++hit[static_cast<size_t>(pixels[cursor].region - 1)];
            ++cursor;
        }
        double overlap = 0;
        for (size_t r = 0; r < region_size.size(); ++r)
            overlap += static_cast<double>(hit[r]) / static_cast<double>(region_size[r]);
        overlap /= static_cast<double>(region_size.size());
        double fpr = static_cast<double>(fp) / static_cast<double>(negatives);

        if (fpr >= fpr_limit) {
            double seg = fpr - prev_fpr;
            double o_at_limit = seg > 0.0 ? prev_overlap + (overlap - prev_overlap) *
                                                               (fpr_limit - prev_fpr) / seg
                                          : overlap;
            area += 0.5 * (prev_overlap + o_at_limit) * (fpr_limit - prev_fpr);
            clipped = true;
            break;
        }
        area += 0.5 * (prev_overlap + overlap) * (fpr - prev_fpr);
        prev_fpr = fpr;
        prev_overlap = overlap;
    }
    if (!clipped) {
        // curve never reached the limit; extend flat at the final overlap
        area += prev_overlap * (fpr_limit - prev_fpr);
    }
    return area / fpr_limit;
}

EvalReport evaluate_scores(const std::vector<ScoredImage>& images, double fpr_limit) {
    if (images.empty()) throw ContractError("evaluate: empty test set");

    auto triple = [&](const std::vector<const ScoredImage*>& subset) {
        MetricTriple t;
        std::vector<double> iscores;
        std::vector<int> ilabels;
        std::vector<double> pscores;
        std::vector<int> plabels;
        std::vector<TensorF> maps, masks;
        for (const ScoredImage* im : subset) {
            iscores.push_back(im->image_score);
            ilabels.push_back(im->image_label);
            int h = 0, w = 0;
            const float* sm = map_data(im->score_map, h, w);
            int mh = 0, mw = 0;
            const float* mk = map_data(im->gt_mask, mh, mw);
            if (mh != h || mw != w) throw ShapeError("evaluate: mask resolution mismatch");
            for (size_t i = 0; i < static_cast<size_t>(h) * w; ++i) {
                pscores.push_back(sm[i]);
                plabels.push_back(mk[i] != 0.0f ? 1 : 0);
            }
            maps.push_back(im->score_map);
            masks.push_back(im->gt_mask);
        }
        t.image_auroc = auroc(iscores, ilabels);
        t.pixel_auroc = auroc(pscores, plabels);
        t.pro = pro(maps, masks, fpr_limit);
        return t;
    };

    EvalReport rep;
    std::vector<const ScoredImage*> all;
    std::map<std::string, std::vector<const ScoredImage*>> by_cat;
    for (const auto& im : images) {
        all.push_back(&im);
        by_cat[im.category].push_back(&im);
        if (im.image_label != 0)
            ++rep.positives;
        else
            ++rep.negatives;
    }
    rep.overall = triple(all);
    if (by_cat.size() > 1)
        for (const auto& [cat, subset] : by_cat) rep.per_category[cat] = triple(subset);
    return rep;
}

std::string EvalReport::to_json() const {
    nlohmann::json j;
    auto put = [](const MetricTriple& t) {
        return nlohmann::json{{"image_auroc", t.image_auroc},
                              {"pixel_auroc", t.pixel_auroc},
                              {"pro", t.pro}};
    };
    j["overall"] = put(overall);
    j["positives"] = positives;
    j["negatives"] = negatives;
    if (!config_digest.empty()) j["config_digest"] = config_digest;
    for (const auto& [cat, t] : per_category) j["per_category"][cat] = put(t);
    return j.dump(2) + "\n";
}

std::string EvalReport::to_table() const {
    std::ostringstream os;
    os << std::fixed << std::setprecision(4);
    os << std::left << std::setw(16) << "category" << std::right << std::setw(12) << "img-auroc"
       << std::setw(12) << "px-auroc" << std::setw(12) << "pro" << "\n";
    auto row = [&](const std::string& name, const MetricTriple& t) {
        os << std::left << std::setw(16) << name << std::right << std::setw(12) << t.image_auroc
           << std::setw(12) << t.pixel_auroc << std::setw(12) << t.pro << "\n";
    };
    for (const auto& [cat, t] : per_category) row(cat, t);
    row("overall", overall);
    return os.str();
}

}  // namespace anom
