#include "anom/feature_bank.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "anom/serialize.hpp"

namespace anom {

namespace {

uint64_t fnv1a(uint64_t h, const void* data, size_t n) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

uint64_t hash_tensor(uint64_t h, const TensorF& t) {
    for (int e : t.shape()) h = fnv1a(h, &e, sizeof(e));
    return fnv1a(h, t.data().data(), t.numel() * sizeof(float));
}

std::string hex64(uint64_t v) {
    std::ostringstream os;
    os << std::hex << v;
    return os.str();
}

// The extractor never trains and never receives gradients, so these two
// spatial helpers build plain value tensors directly.
TensorF wrap_pad_hw(const TensorF& x, int pad) {
    int c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
    if (pad > h || pad > w) throw ContractError("wrap pad must not exceed the image size");
    TensorF out = TensorF::zeros({c, h + 2 * pad, w + 2 * pad});
    auto mirror = [pad](int i, int n) { return ((i - pad) % n + n) % n; };
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h + 2 * pad; ++y) {
            int sy = mirror(y, h);
            for (int xx = 0; xx < w + 2 * pad; ++xx)
                out.mutable_data()[((static_cast<size_t>(ch) * (h + 2 * pad)) + y) * (w + 2 * pad) +
                                   xx] =
                    x[((static_cast<size_t>(ch) * h) + sy) * w + mirror(xx, w)];
        }
    return out;
}

TensorF crop_center_hw(const TensorF& x, int margin) {
    int c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
    int oh = h - 2 * margin, ow = w - 2 * margin;
    if (oh < 1 || ow < 1) throw ContractError("crop margin leaves no pixels");
    TensorF out = TensorF::zeros({c, oh, ow});
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < oh; ++y)
            for (int xx = 0; xx < ow; ++xx)
                out.mutable_data()[((static_cast<size_t>(ch) * oh) + y) * ow + xx] =
                    x[((static_cast<size_t>(ch) * h) + y + margin) * w + xx + margin];
    return out;
}

}  // namespace

FeatureExtractor FeatureExtractor::builtin(const PyramidConfig& cfg) {
    if (cfg.widths.empty()) throw ContractError("pyramid needs at least one stage");
    FeatureExtractor ex;
    ex.builtin_ = true;
    ex.channels_ = cfg.widths;

    int stride_total = 1 << static_cast<int>(cfg.widths.size());
    if (cfg.edge_pad < 0 || (cfg.edge_pad > 0 && cfg.edge_pad % stride_total != 0))
        throw ContractError("edge_pad must be non-negative and divisible by the total stride");
    ex.edge_pad_ = cfg.edge_pad;

    std::ostringstream id;
    id << "builtin_pyramid/seed" << cfg.seed << "/in" << cfg.in_channels;
    for (int w : cfg.widths) id << "-" << w;
    if (cfg.edge_pad > 0) id << "/pad" << cfg.edge_pad;
    ex.id_ = id.str();

    Rng rng = Rng(cfg.seed).split(0xfea7);
    int in = cfg.in_channels;
    for (size_t k = 0; k < cfg.widths.size(); ++k) {
        ex.stages_.emplace_back(ex.params_, "stage" + std::to_string(k), in, cfg.widths[k], 2, rng);
        in = cfg.widths[k];
    }
    // the pyramid is fixed; nothing here ever trains
    for (auto& [name, p] : ex.params_.params) p.set_requires_grad(false);
    return ex;
}

FeatureExtractor FeatureExtractor::file_ingest(std::filesystem::path dir, std::vector<int> channels,
                                               std::string id) {
    if (channels.empty()) throw ContractError("file ingest needs at least one layer");
    FeatureExtractor ex;
    ex.dir_ = std::move(dir);
    ex.channels_ = std::move(channels);
    ex.id_ = std::move(id);
    return ex;
}

FeatureStack FeatureExtractor::extract(const TensorF& image, const std::string& image_ref) const {
    FeatureStack stack;
    stack.extractor_id = id_;
    stack.image_ref = image_ref;
    if (builtin_) {
        if (image.shape().size() != 3)
            throw ShapeError("extract expects (C,H,W), got " + shape_str(image.shape()));
        TensorF x = edge_pad_ > 0 ? wrap_pad_hw(image, edge_pad_) : image;
        int margin = edge_pad_;
        for (const auto& stage : stages_) {
            x = relu(stage(x));
            margin /= 2;
            stack.layers.push_back(margin > 0 ? crop_center_hw(x, margin) : x);
        }
        return stack;
    }
    if (image_ref.empty()) throw ContractError("file ingest requires an image reference");
    for (size_t k = 0; k < channels_.size(); ++k) {
        auto path = dir_ / (image_ref + ".layer" + std::to_string(k) + ".rntf");
        TensorF t = rntf::load_tensor<float>(path);
        if (t.shape().size() != 3 || t.shape()[0] != channels_[k])
            throw ShapeError("feature file " + path.string() + " has shape " + shape_str(t.shape()) +
                             ", expected " + std::to_string(channels_[k]) + " channels");
        stack.layers.push_back(std::move(t));
    }
    return stack;
}

std::string triplet_digest(const std::vector<AnomalySample>& triplets) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& s : triplets) {
        h = hash_tensor(h, s.blended);
        h = hash_tensor(h, s.normal);
        h = hash_tensor(h, s.mask);
    }
    return hex64(h);
}

namespace {

// aligned, normalized difference of one channel against the mask resolution
double channel_score(const TensorF& fa, const TensorF& fi, int channel, const TensorF& mask) {
    TensorF a = slice_channels(fa, channel, channel + 1);
    TensorF i = slice_channels(fi, channel, channel + 1);
    TensorF d = square(sub(a, i));
    TensorF up = resize_bilinear(d, mask.shape()[0], mask.shape()[1]);
    float lo = up[0], hi = up[0];
    for (float v : up.data()) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    float range = hi - lo;
    // degenerate maps: a flat zero map normalizes to 0, a flat nonzero one to 1
    bool flat = range < 1e-12f;
    float flat_value = hi < 1e-12f ? 0.0f : 1.0f;
    double acc = 0;
    for (size_t j = 0; j < up.numel(); ++j) {
        double f = flat ? flat_value : (up[j] - lo) / range;
        double e = f - mask[j];
        acc += e * e;
    }
    return acc / static_cast<double>(up.numel());
}

}  // namespace

double afs_score(const FeatureExtractor& ex, int layer, int channel,
                 const std::vector<AnomalySample>& triplets) {
    if (triplets.empty()) throw ContractError("afs_score needs at least one triplet");
    if (layer < 0 || layer >= ex.layer_count()) throw ContractError("layer index out of range");
    if (channel < 0 || channel >= ex.channels(layer))
        throw ContractError("channel index out of range");
    double acc = 0;
    for (const auto& s : triplets) {
        TensorF fa = ex.extract(s.blended, s.blended_ref).layers[static_cast<size_t>(layer)];
        TensorF fi = ex.extract(s.normal, s.normal_ref).layers[static_cast<size_t>(layer)];
        acc += channel_score(fa, fi, channel, s.mask);
    }
    return acc / static_cast<double>(triplets.size());
}

AFSIndexCache afs_select(const FeatureExtractor& ex, const std::vector<AnomalySample>& triplets,
                         const std::vector<int>& m, const std::filesystem::path& cache_path) {
    if (static_cast<int>(m.size()) != ex.layer_count())
        throw ContractError("per-layer count list does not match the extractor");
    for (int k = 0; k < ex.layer_count(); ++k)
        if (m[static_cast<size_t>(k)] < 1 || m[static_cast<size_t>(k)] > ex.channels(k))
            throw ContractError("kept-channel count out of range for layer " + std::to_string(k));

    std::string digest = triplet_digest(triplets);
    if (!cache_path.empty() && std::filesystem::exists(cache_path)) {
        AFSIndexCache cached = load_afs_cache(cache_path);
        if (cached.extractor_id == ex.id() && cached.digest == digest && cached.m == m)
            return cached;
    }

    // extract every stack once, then score layer by layer
    std::vector<FeatureStack> fa, fi;
    fa.reserve(triplets.size());
    fi.reserve(triplets.size());
    for (const auto& s : triplets) {
        fa.push_back(ex.extract(s.blended, s.blended_ref));
        fi.push_back(ex.extract(s.normal, s.normal_ref));
    }

    AFSIndexCache cache;
    cache.extractor_id = ex.id();
    cache.digest = digest;
    cache.m = m;
    for (int k = 0; k < ex.layer_count(); ++k) {
        int c = ex.channels(k);
        std::vector<double> score(static_cast<size_t>(c), 0.0);
        for (size_t n = 0; n < triplets.size(); ++n)
            for (int ch = 0; ch < c; ++ch)
                score[static_cast<size_t>(ch)] +=
                    channel_score(fa[n].layers[static_cast<size_t>(k)],
                                  fi[n].layers[static_cast<size_t>(k)], ch, triplets[n].mask);
        for (auto& v : score) v /= static_cast<double>(triplets.size());

        std::vector<int> order(static_cast<size_t>(c));
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
            return score[static_cast<size_t>(a)] < score[static_cast<size_t>(b)];
        });
        order.resize(static_cast<size_t>(m[static_cast<size_t>(k)]));
        std::vector<double> kept;
        for (int ch : order) kept.push_back(score[static_cast<size_t>(ch)]);
        cache.indices.push_back(std::move(order));
        cache.losses.push_back(std::move(kept));
    }

    if (!cache_path.empty()) save_afs_cache(cache_path, cache);
    return cache;
}

void save_afs_cache(const std::filesystem::path& path, const AFSIndexCache& cache) {
    nlohmann::json j;
    j["extractor_id"] = cache.extractor_id;
    j["digest"] = cache.digest;
    j["m"] = cache.m;
    j["indices"] = cache.indices;
    j["losses"] = cache.losses;
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream os(tmp);
        if (!os) throw IoError("cannot write " + tmp.string());
        os << j.dump(2) << "\n";
    }
    std::filesystem::rename(tmp, path);
}

AFSIndexCache load_afs_cache(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open " + path.string());
    nlohmann::json j;
    is >> j;
    AFSIndexCache cache;
    cache.extractor_id = j.at("extractor_id").get<std::string>();
    cache.digest = j.at("digest").get<std::string>();
    cache.m = j.at("m").get<std::vector<int>>();
    cache.indices = j.at("indices").get<std::vector<std::vector<int>>>();
    cache.losses = j.at("losses").get<std::vector<std::vector<double>>>();
    return cache;
}

FeatureStack apply_selection(const FeatureStack& stack, const AFSIndexCache& cache) {
    if (stack.extractor_id != cache.extractor_id)
        throw ContractError("selection cache from extractor '" + cache.extractor_id +
                            "' applied to features from '" + stack.extractor_id + "'");
    if (stack.layers.size() != cache.indices.size())
        throw ContractError("selection cache layer count mismatch");
    FeatureStack out;
    out.extractor_id = stack.extractor_id;
    out.image_ref = stack.image_ref;
    for (size_t k = 0; k < stack.layers.size(); ++k)
        out.layers.push_back(gather_channels(stack.layers[k], cache.indices[k]));
    return out;
}

}  // namespace anom
