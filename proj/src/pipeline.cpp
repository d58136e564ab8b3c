#include "anom/pipeline.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "anom/diffusion.hpp"
#include "anom/image.hpp"
#include "anom/serialize.hpp"

namespace anom {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

uint64_t fnv1a(uint64_t h, const void* data, size_t n) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string hash_text(const std::string& s) {
    uint64_t h = fnv1a(0xcbf29ce484222325ULL, s.data(), s.size());
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

uint64_t hash_tensor_acc(uint64_t h, const TensorF& t) {
    for (int e : t.shape()) h = fnv1a(h, &e, sizeof(e));
    return fnv1a(h, t.data().data(), t.numel() * sizeof(float));
}

std::string hex64(uint64_t v) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << v;
    return os.str();
}

json config_to_json(const PipelineConfig& c) {
    return json{{"dataset_root", c.dataset_root},
                {"work_dir", c.work_dir},
                {"category", c.category},
                {"multiclass", c.multiclass},
                {"image_size", c.image_size},
                {"workers", c.workers},
                {"seed", c.seed},
                {"diffusion_size", c.diffusion_size},
                {"diffusion_t", c.diffusion_t},
                {"diffusion_schedule", c.diffusion_schedule},
                {"diffusion_base", c.diffusion_base},
                {"diffusion_steps", c.diffusion_steps},
                {"diffusion_batch", c.diffusion_batch},
                {"diffusion_lr", c.diffusion_lr},
                {"sampler_kind", c.sampler_kind},
                {"s_min", c.s_min},
                {"s_max", c.s_max},
                {"sampler_steps", c.sampler_steps},
                {"synth_count", c.synth_count},
                {"delta_min", c.delta_min},
                {"delta_max", c.delta_max},
                {"extractor_widths", c.extractor_widths},
                {"extractor_seed", c.extractor_seed},
                {"m", c.m},
                {"afs_triplets", c.afs_triplets},
                {"arch", c.arch},
                {"rrs_mode", c.rrs_mode},
                {"retention", c.retention},
                {"train_steps", c.train_steps},
                {"train_batch", c.train_batch},
                {"train_lr", c.train_lr},
                {"train_lr_d", c.train_lr_d},
                {"train_pool", c.train_pool}};
}

void config_from_json(const json& j, PipelineConfig& c) {
    if (!j.is_object()) throw ConfigError("config document must be a JSON object");
    json known = config_to_json(PipelineConfig{});
    for (const auto& [key, value] : j.items())
        if (!known.contains(key)) throw ConfigError("unknown config key: " + key);

    auto get = [&](const char* key, auto& field) {
        if (!j.contains(key)) return;
        try {
            j.at(key).get_to(field);
        } catch (const json::exception&) {
            throw ConfigError(std::string("config key has the wrong type: ") + key);
        }
    };
    get("dataset_root", c.dataset_root);
    get("work_dir", c.work_dir);
    get("category", c.category);
    get("multiclass", c.multiclass);
    get("image_size", c.image_size);
    get("workers", c.workers);
    get("seed", c.seed);
    get("diffusion_size", c.diffusion_size);
    get("diffusion_t", c.diffusion_t);
    get("diffusion_schedule", c.diffusion_schedule);
    get("diffusion_base", c.diffusion_base);
    get("diffusion_steps", c.diffusion_steps);
    get("diffusion_batch", c.diffusion_batch);
    get("diffusion_lr", c.diffusion_lr);
    get("sampler_kind", c.sampler_kind);
    get("s_min", c.s_min);
    get("s_max", c.s_max);
    get("sampler_steps", c.sampler_steps);
    get("synth_count", c.synth_count);
    get("delta_min", c.delta_min);
    get("delta_max", c.delta_max);
    get("extractor_widths", c.extractor_widths);
    get("extractor_seed", c.extractor_seed);
    get("m", c.m);
    get("afs_triplets", c.afs_triplets);
    get("arch", c.arch);
    get("rrs_mode", c.rrs_mode);
    get("retention", c.retention);
    get("train_steps", c.train_steps);
    get("train_batch", c.train_batch);
    get("train_lr", c.train_lr);
    get("train_lr_d", c.train_lr_d);
    get("train_pool", c.train_pool);
}

// nearest-neighbor rescale for binary masks, any size pair
TensorF resize_mask(const TensorF& m, int oh, int ow) {
    int h = m.shape()[0], w = m.shape()[1];
    if (h == oh && w == ow) return m;
    TensorF out = TensorF::zeros({oh, ow});
    for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
            int sy = std::min(h - 1, y * h / oh);
            int sx = std::min(w - 1, x * w / ow);
            out.mutable_data()[static_cast<size_t>(y) * ow + x] =
                m[static_cast<size_t>(sy) * w + sx] != 0.0f ? 1.0f : 0.0f;
        }
    return out;
}

TensorF to_rgb_sized(TensorF img, int size) {
    if (img.shape()[0] == 1) img = concat_channels(std::vector<TensorF>{img, img, img});
    if (img.shape()[1] != size || img.shape()[2] != size) img = resize_bilinear(img, size, size);
    return img;
}

}  // namespace

PipelineConfig PipelineConfig::from_file(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file: " + path.string());
    std::stringstream ss;
    ss << is.rdbuf();
    return from_json_text(ss.str());
}

PipelineConfig PipelineConfig::from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    PipelineConfig c;
    config_from_json(j, c);
    c.validate();
    return c;
}

void PipelineConfig::apply_override(const std::string& assignment) {
    auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0)
        throw ConfigError("override must be key=value: " + assignment);
    std::string key = assignment.substr(0, eq);
    std::string value = assignment.substr(eq + 1);

    json j = config_to_json(*this);
    if (!j.contains(key)) throw ConfigError("unknown config key: " + key);
    json parsed;
    if (j.at(key).is_string()) {
        parsed = value;
    } else {
        try {
            parsed = json::parse(value);
        } catch (const json::exception&) {
            throw ConfigError("cannot parse override value for " + key + ": " + value);
        }
    }
    j[key] = parsed;
    config_from_json(j, *this);
    validate();
}

void PipelineConfig::validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError("config: " + msg); };
    if (image_size < 16 || image_size % 16 != 0)
        fail("image_size must be a positive multiple of 16");
    if (diffusion_size < 8 || diffusion_size % 4 != 0)
        fail("diffusion_size must be at least 8 and divisible by 4");
    if (diffusion_t < 2) fail("diffusion_t must be at least 2");
    if (diffusion_schedule != "linear" && diffusion_schedule != "cosine")
        fail("diffusion_schedule must be linear or cosine");
    if (diffusion_base < 2) fail("diffusion_base too small");
    if (diffusion_steps < 0 || diffusion_batch < 1) fail("bad diffusion step or batch count");
    if (sampler_kind != "ddpm" && sampler_kind != "ddim")
        fail("sampler_kind must be ddpm or ddim");
    if (s_min < 0.0 || s_max < s_min) fail("anomaly strength range invalid");
    if (sampler_steps < 0 || sampler_steps > diffusion_t)
        fail("sampler_steps outside [0, diffusion_t]");
    if (synth_count < 0) fail("synth_count negative");
    if (!(delta_min >= 0.0 && delta_max <= 1.0 && delta_min <= delta_max))
        fail("opacity range must satisfy 0 <= min <= max <= 1");
    if (extractor_widths.empty() || extractor_widths.size() != m.size())
        fail("extractor_widths and m must be non-empty and aligned");
    for (size_t k = 0; k < m.size(); ++k) {
        if (extractor_widths[k] < 1) fail("extractor width must be positive");
        if (m[k] < 1 || m[k] > extractor_widths[k])
            fail("m[" + std::to_string(k) + "] outside [1, width]");
    }
    if ((image_size >> m.size()) < 4)
        fail("too many pyramid stages for this image size");
    if (afs_triplets < 1) fail("afs_triplets must be positive");
    if (arch != "independent" && arch != "neighbor_aligned") fail("unknown arch tag");
    if (rrs_mode != "max" && rrs_mode != "avg" && rrs_mode != "max_and_avg")
        fail("unknown rrs mode");
    if (retention <= 0.0 || retention > 1.0) fail("retention outside (0, 1]");
    if (train_steps < 0 || train_batch < 1) fail("bad train step or batch count");
    if (train_lr <= 0.0 || train_lr_d <= 0.0) fail("learning rates must be positive");
    if (train_pool < 0) fail("train_pool must be non-negative");
    if (workers < 1) fail("workers must be positive");
}

std::string PipelineConfig::digest() const {
    // work_dir and workers change where and how fast results are computed,
    // never what they are, so they stay out of the content key
    json j = config_to_json(*this);
    j.erase("work_dir");
    j.erase("workers");
    return hash_text(j.dump());
}

std::string PipelineConfig::to_json_text() const { return config_to_json(*this).dump(2) + "\n"; }

RRSConfig PipelineConfig::rrs() const {
    RRSConfig r;
    r.retention = retention;
    r.mode = rrs_mode == "max" ? RRSMode::max
             : rrs_mode == "avg" ? RRSMode::avg
                                 : RRSMode::max_and_avg;
    return r;
}

ReconArch PipelineConfig::recon_arch() const {
    return arch == "independent" ? ReconArch::independent : ReconArch::neighbor_aligned;
}

Dataset load_dataset(const PipelineConfig& cfg) {
    fs::path root = cfg.dataset_root;
    if (!fs::is_directory(root)) throw DataError("dataset root not found: " + root.string());

    std::vector<std::string> categories;
    if (!cfg.category.empty()) {
        categories.push_back(cfg.category);
    } else {
        for (const auto& e : fs::directory_iterator(root))
            if (e.is_directory()) categories.push_back(e.path().filename().string());
        std::sort(categories.begin(), categories.end());
    }
    if (categories.empty()) throw DataError("no categories under " + root.string());

    Dataset ds;
    uint64_t htrain = 0xcbf29ce484222325ULL, htest = htrain;
    for (const auto& cat : categories) {
        fs::path train_dir = root / cat / "train" / "good";
        if (!fs::is_directory(train_dir))
            throw DataError("missing train directory: " + train_dir.string());
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(train_dir))
            if (e.path().extension() == ".png") files.push_back(e.path());
        std::sort(files.begin(), files.end());
        if (files.empty()) throw DataError("no training images in " + train_dir.string());
        for (const auto& f : files) {
            TensorF img = to_rgb_sized(load_png(f), cfg.image_size);
            htrain = hash_tensor_acc(htrain, img);
            ds.train.push_back(std::move(img));
            ds.train_names.push_back(cat + "/" + f.filename().string());
        }

        fs::path test_dir = root / cat / "test";
        if (!fs::is_directory(test_dir)) continue;
        std::vector<std::string> defects;
        for (const auto& e : fs::directory_iterator(test_dir))
            if (e.is_directory()) defects.push_back(e.path().filename().string());
        std::sort(defects.begin(), defects.end());
        for (const auto& defect : defects) {
            std::vector<fs::path> tfiles;
            for (const auto& e : fs::directory_iterator(test_dir / defect))
                if (e.path().extension() == ".png") tfiles.push_back(e.path());
            std::sort(tfiles.begin(), tfiles.end());
            for (const auto& f : tfiles) {
                TestImage ti;
                ti.path = f;
                ti.category = cat;
                ti.defect = defect;
                ti.label = defect == "good" ? 0 : 1;
                ti.image = to_rgb_sized(load_png(f), cfg.image_size);
                if (ti.label) {
                    fs::path mpath = root / cat / "ground_truth" / defect /
                                     (f.stem().string() + "_mask.png");
                    if (!fs::exists(mpath))
                        throw DataError("missing ground-truth mask: " + mpath.string());
                    TensorF m = to_gray(load_png(mpath));
                    TensorF flat = TensorF::zeros({m.shape()[1], m.shape()[2]});
                    for (size_t i = 0; i < flat.numel(); ++i)
                        flat.mutable_data()[i] = m[i] > 0.5f ? 1.0f : 0.0f;
                    ti.mask = resize_mask(flat, cfg.image_size, cfg.image_size);
                } else {
                    ti.mask = TensorF::zeros({cfg.image_size, cfg.image_size});
                }
                htest = hash_tensor_acc(htest, ti.image);
                htest = hash_tensor_acc(htest, ti.mask);
                ds.test.push_back(std::move(ti));
            }
        }
    }
    ds.train_digest = hex64(htrain);
    ds.test_digest = hex64(htest);
    return ds;
}

void generate_toy_benchmark(const fs::path& root, uint64_t seed, int train_count,
                            int test_defective, int test_good) {
    const int s = 64;
    fs::path cat = root / "texture";
    fs::create_directories(cat / "train" / "good");
    fs::create_directories(cat / "test" / "good");
    fs::create_directories(cat / "test" / "square");
    fs::create_directories(cat / "test" / "scratch");
    fs::create_directories(cat / "ground_truth" / "square");
    fs::create_directories(cat / "ground_truth" / "scratch");

    // a tight normal manifold: near-fixed phase so off-phase or warped
    // texture is genuinely anomalous
    auto stripes = [&](Rng& rng) {
        TensorF img = TensorF::zeros({3, s, s});
        double phase = rng.uniform(-0.15, 0.15);
        auto& d = img.mutable_data();
        const float tint[3] = {1.0f, 0.96f, 0.9f};
        for (int y = 0; y < s; ++y)
            for (int x = 0; x < s; ++x) {
                double v = 0.55 + 0.3 * std::tanh(3.0 * std::sin(2.0 * M_PI * x / 8.0 + phase));
                v += 0.003 * rng.normal();
                float base = static_cast<float>(std::clamp(v, 0.0, 1.0));
                for (int c = 0; c < 3; ++c)
                    d[(static_cast<size_t>(c) * s + y) * s + x] = base * tint[c];
            }
        return img;
    };

    auto add_square = [&](TensorF& img, TensorF& mask, Rng& rng) {
        int side = 10 + static_cast<int>(rng.next_below(7));
        int y0 = static_cast<int>(rng.next_below(static_cast<uint64_t>(s - side)));
        int x0 = static_cast<int>(rng.next_below(static_cast<uint64_t>(s - side)));
        float fill = rng.uniform() < 0.5 ? 0.08f : 0.97f;
        auto& d = img.mutable_data();
        for (int y = y0; y < y0 + side; ++y)
            for (int x = x0; x < x0 + side; ++x) {
                for (int c = 0; c < 3; ++c)
                    d[(static_cast<size_t>(c) * s + y) * s + x] =
                        std::clamp(fill + 0.02f * static_cast<float>(rng.normal()), 0.0f, 1.0f);
                mask.mutable_data()[static_cast<size_t>(y) * s + x] = 1.0f;
            }
    };

    auto add_scratch = [&](TensorF& img, TensorF& mask, Rng& rng) {
        double x = rng.uniform(8.0, s - 8.0);
        double y = rng.uniform(8.0, s - 8.0);
        double ang = rng.uniform(0.0, 2.0 * M_PI);
        double dx = std::cos(ang), dy = std::sin(ang);
        int len = 24 + static_cast<int>(rng.next_below(16));
        float fill = 0.03f;
        auto& d = img.mutable_data();
        for (int t = 0; t < len; ++t) {
            int cx = static_cast<int>(x + t * dx);
            int cy = static_cast<int>(y + t * dy);
            for (int oy = -1; oy <= 1; ++oy)
                for (int ox = -1; ox <= 1; ++ox) {
                    int py = cy + oy, px = cx + ox;
                    if (py < 0 || py >= s || px < 0 || px >= s) continue;
                    for (int c = 0; c < 3; ++c)
                        d[(static_cast<size_t>(c) * s + py) * s + px] = fill;
                    mask.mutable_data()[static_cast<size_t>(py) * s + px] = 1.0f;
                }
        }
    };

    auto name = [](int i) {
        std::ostringstream os;
        os << std::setw(3) << std::setfill('0') << i << ".png";
        return os.str();
    };

    Rng rng(seed);
    for (int i = 0; i < train_count; ++i) {
        Rng r = rng.split(1000 + i);
        save_png(cat / "train" / "good" / name(i), stripes(r));
    }
    for (int i = 0; i < test_good; ++i) {
        Rng r = rng.split(2000 + i);
        save_png(cat / "test" / "good" / name(i), stripes(r));
    }
    for (int i = 0; i < test_defective; ++i) {
        Rng r = rng.split(3000 + i);
        TensorF img = stripes(r);
        TensorF mask = TensorF::zeros({s, s});
        bool square = i % 2 == 0;
        if (square)
            add_square(img, mask, r);
        else
            add_scratch(img, mask, r);
        const char* kind = square ? "square" : "scratch";
        save_png(cat / "test" / kind / name(i), img);
        TensorF mimg = TensorF::zeros({1, s, s});
        for (size_t j = 0; j < mask.numel(); ++j) mimg.mutable_data()[j] = mask[j];
        save_png(cat / "ground_truth" / kind / (std::to_string(i).insert(0, "000").substr(
                                                    std::to_string(i).size()) + "_mask.png"),
                 mimg);
    }
}

namespace {

DiffusionSchedule schedule_for(const PipelineConfig& cfg) {
    return build_schedule(cfg.diffusion_t, cfg.diffusion_schedule == "linear"
                                               ? ScheduleKind::linear
                                               : ScheduleKind::cosine);
}

std::vector<TensorF> diffusion_inputs(const PipelineConfig& cfg, const Dataset& ds) {
    std::vector<TensorF> out;
    out.reserve(ds.train.size());
    for (const auto& img : ds.train) {
        TensorF g = resize_bilinear(to_gray(img), cfg.diffusion_size, cfg.diffusion_size);
        for (auto& v : g.mutable_data()) v = 2.0f * v - 1.0f;
        out.push_back(std::move(g));
    }
    return out;
}

std::string diffusion_digest(const PipelineConfig& cfg, const Dataset& ds) {
    json j{{"stage", "diffusion"},     {"train", ds.train_digest},
           {"size", cfg.diffusion_size}, {"t", cfg.diffusion_t},
           {"schedule", cfg.diffusion_schedule}, {"base", cfg.diffusion_base},
           {"steps", cfg.diffusion_steps}, {"batch", cfg.diffusion_batch},
           {"lr", cfg.diffusion_lr},   {"seed", cfg.seed}};
    return hash_text(j.dump());
}

std::string synth_digest(const PipelineConfig& cfg, const std::string& diff_digest) {
    json j{{"stage", "synth"},        {"diffusion", diff_digest},
           {"kind", cfg.sampler_kind}, {"s_min", cfg.s_min},
           {"s_max", cfg.s_max},      {"steps", cfg.sampler_steps},
           {"count", cfg.synth_count}, {"seed", cfg.seed}};
    return hash_text(j.dump());
}

std::string afs_digest(const PipelineConfig& cfg, const Dataset& ds,
                       const std::string& synth_dig) {
    json j{{"stage", "afs"},          {"train", ds.train_digest},
           {"donors", synth_dig},     {"widths", cfg.extractor_widths},
           {"exseed", cfg.extractor_seed}, {"m", cfg.m},
           {"triplets", cfg.afs_triplets}, {"delta", {cfg.delta_min, cfg.delta_max}},
           {"image_size", cfg.image_size}, {"seed", cfg.seed}};
    return hash_text(j.dump());
}

std::string train_digest_of(const PipelineConfig& cfg, const std::string& afs_dig) {
    json j{{"stage", "train"},      {"afs", afs_dig},
           {"arch", cfg.arch},      {"mode", cfg.rrs_mode},
           {"retention", cfg.retention}, {"steps", cfg.train_steps},
           {"batch", cfg.train_batch},   {"lr", cfg.train_lr},
           {"lr_d", cfg.train_lr_d},     {"pool", cfg.train_pool},
           {"seed", cfg.seed}};
    return hash_text(j.dump());
}

fs::path work_path(const PipelineConfig& cfg) {
    fs::path w = cfg.work_dir;
    if (w.empty()) throw ConfigError("work_dir is not set");
    fs::create_directories(w);
    return w;
}

FeatureExtractor make_extractor(const PipelineConfig& cfg) {
    PyramidConfig pc;
    pc.in_channels = 3;
    pc.widths = cfg.extractor_widths;
    pc.seed = cfg.extractor_seed;
    // largest stride-aligned pad up to half the image, so border features are
    // computed from mirrored texture rather than the convolution zero pad
    int stride_total = 1 << static_cast<int>(pc.widths.size());
    pc.edge_pad = (cfg.image_size / 2 / stride_total) * stride_total;
    return FeatureExtractor::builtin(pc);
}

std::vector<TensorF> load_donors(const fs::path& dir) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.path().extension() == ".png") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    std::vector<TensorF> donors;
    for (const auto& f : files) donors.push_back(load_png(f));
    return donors;
}

SynthConfig synth_config(const PipelineConfig& cfg, uint64_t stream) {
    SynthConfig sc;
    sc.delta_lo = cfg.delta_min;
    sc.delta_hi = cfg.delta_max;
    sc.seed = Rng(cfg.seed).split(stream).next_u64();
    return sc;
}

struct ScaleGeometry {
    std::vector<int> heights, widths;
};

ScaleGeometry scale_geometry(const PipelineConfig& cfg) {
    ScaleGeometry g;
    int side = cfg.image_size;
    for (size_t k = 0; k < cfg.m.size(); ++k) {
        side /= 2;
        g.heights.push_back(side);
        g.widths.push_back(side);
    }
    return g;
}

}  // namespace

StageResult cmd_train_diffusion(const PipelineConfig& cfg) {
    Dataset ds = load_dataset(cfg);
    fs::path w = work_path(cfg);
    std::string dig = diffusion_digest(cfg, ds);
    StageResult res;
    res.digest = dig;
    res.artifact = w / ("diffusion-" + dig + ".params");
    if (fs::exists(res.artifact)) {
        res.cache_hit = true;
        return res;
    }

    auto data = diffusion_inputs(cfg, ds);
    auto sched = schedule_for(cfg);
    UNetDenoiser<float> den(1, cfg.diffusion_base, cfg.seed);
    DiffusionTrainConfig tc;
    tc.steps = cfg.diffusion_steps;
    tc.batch = cfg.diffusion_batch;
    tc.lr = cfg.diffusion_lr;
    tc.seed = cfg.seed;
    auto log = train_diffusion(data, sched, den, tc);

    den.params().save(res.artifact);
    json j{{"digest", dig}, {"simple", log.simple}, {"vlb", log.vlb}};
    std::ofstream os(w / ("diffusion-" + dig + ".json"));
    os << j.dump(2) << "\n";
    return res;
}

StageResult cmd_synth(const PipelineConfig& cfg) {
    Dataset ds = load_dataset(cfg);
    fs::path w = work_path(cfg);
    std::string diff_dig = diffusion_digest(cfg, ds);
    fs::path ckpt = w / ("diffusion-" + diff_dig + ".params");
    if (!fs::exists(ckpt))
        throw ArtifactError("diffusion checkpoint missing: " + ckpt.string());

    std::string dig = synth_digest(cfg, diff_dig);
    StageResult res;
    res.digest = dig;
    res.artifact = w / ("donors-" + dig);
    fs::path manifest = res.artifact / "manifest.jsonl";
    if (fs::exists(manifest)) {
        res.cache_hit = true;
        return res;
    }
    fs::create_directories(res.artifact);

    UNetDenoiser<float> den(1, cfg.diffusion_base, cfg.seed);
    den.params().load_values_from(ParamSet<float>::load(ckpt));
    auto sched = schedule_for(cfg);

    std::ostringstream lines;
    for (int i = 0; i < cfg.synth_count; ++i) {
        Rng rng = Rng(cfg.seed).split(0x5da50000ULL + static_cast<uint64_t>(i));
        double s = rng.uniform(cfg.s_min, cfg.s_max);
        SamplerConfig sc;
        sc.kind = cfg.sampler_kind == "ddpm" ? SamplerKind::ddpm : SamplerKind::ddim;
        sc.s = s;
        if (cfg.sampler_steps > 0 && cfg.sampler_steps < cfg.diffusion_t)
            sc.steps = evenly_spaced_steps(cfg.diffusion_t, cfg.sampler_steps);
        TensorF x = sdas_sample(den, sched, sc, rng,
                                {1, cfg.diffusion_size, cfg.diffusion_size});
        for (auto& v : x.mutable_data()) v = std::clamp(0.5f * (v + 1.0f), 0.0f, 1.0f);
        std::ostringstream nm;
        nm << std::setw(3) << std::setfill('0') << i << ".png";
        save_png(res.artifact / nm.str(), x);
        lines << json{{"index", i}, {"s", s}, {"file", nm.str()}}.dump() << "\n";
    }
    std::ofstream os(manifest);
    os << lines.str();
    return res;
}

StageResult cmd_afs(const PipelineConfig& cfg) {
    Dataset ds = load_dataset(cfg);
    fs::path w = work_path(cfg);
    std::string synth_dig = synth_digest(cfg, diffusion_digest(cfg, ds));
    fs::path donor_dir = w / ("donors-" + synth_dig);
    if (!fs::exists(donor_dir / "manifest.jsonl"))
        throw ArtifactError("donor set missing: " + donor_dir.string());
    auto donors = load_donors(donor_dir);
    if (donors.empty()) throw DataError("donor directory is empty: " + donor_dir.string());

    std::string dig = afs_digest(cfg, ds, synth_dig);
    StageResult res;
    res.digest = dig;
    res.artifact = w / ("afs-" + dig + ".json");
    res.cache_hit = fs::exists(res.artifact);

    // anomalous triplets only; the stream interleaves, so walk odd indices
    SynthConfig sc = synth_config(cfg, 0xaf51);
    std::vector<AnomalySample> triplets;
    size_t index = 0;
    while (static_cast<int>(triplets.size()) < cfg.afs_triplets) {
        AnomalySample s = synth_sample(ds.train, donors, sc, index++);
        if (s.is_anomalous) triplets.push_back(std::move(s));
        if (index > static_cast<size_t>(cfg.afs_triplets) * 64 + 64)
            throw DataError("anomaly synthesis kept producing empty masks");
    }

    FeatureExtractor ex = make_extractor(cfg);
    afs_select(ex, triplets, cfg.m, res.artifact);
    return res;
}

namespace {

struct TrainedPipeline {
    ReconstructorSet g;
    Discriminator d;
    ResidualStandardizer stats;
    AFSIndexCache cache;
};

fs::path train_meta_path(const fs::path& w, const std::string& dig) {
    return w / ("pipeline-" + dig + ".meta.json");
}

}  // namespace

StageResult cmd_train(const PipelineConfig& cfg) {
    Dataset ds = load_dataset(cfg);
    fs::path w = work_path(cfg);
    std::string synth_dig = synth_digest(cfg, diffusion_digest(cfg, ds));
    std::string afs_dig = afs_digest(cfg, ds, synth_dig);
    fs::path cache_path = w / ("afs-" + afs_dig + ".json");
    if (!fs::exists(cache_path))
        throw ArtifactError("feature selection cache missing: " + cache_path.string());
    AFSIndexCache cache = load_afs_cache(cache_path);

    std::string dig = train_digest_of(cfg, afs_dig);
    StageResult res;
    res.digest = dig;
    res.artifact = train_meta_path(w, dig);
    if (fs::exists(res.artifact)) {
        res.cache_hit = true;
        return res;
    }

    fs::path donor_dir = w / ("donors-" + synth_dig);
    auto donors = load_donors(donor_dir);
    if (donors.empty()) throw ArtifactError("donor set missing: " + donor_dir.string());

    FeatureExtractor ex = make_extractor(cfg);
    ScaleGeometry geo = scale_geometry(cfg);
    ReconstructorSet g =
        ReconstructorSet::build(cfg.m, geo.heights, geo.widths, cfg.recon_arch(), cfg.seed,
                                /*edge_pad=*/8);
    int m_total = 0;
    for (int v : cfg.m) m_total += v;
    RRSConfig rc = cfg.rrs();
    Discriminator d(rc.r_for(m_total), 128, cfg.seed);
    ResidualStandardizer stats;

    SynthConfig sc = synth_config(cfg, 0x7a11);
    AdamOptimizer<float> og(static_cast<float>(cfg.train_lr)),
        od(static_cast<float>(cfg.train_lr_d));
    std::vector<double> rec_log, seg_log;

    struct PoolEntry {
        std::vector<TensorF> anom, normal;
        TensorF mask;
    };
    // features of a fixed synthetic sample set are extracted once and cycled;
    // the extractor is frozen, so repeated extraction would recompute the
    // exact same tensors every step
    std::vector<PoolEntry> pool;
    auto make_entry = [&](size_t idx) {
        AnomalySample s = synth_sample(ds.train, donors, sc, idx);
        PoolEntry e;
        e.anom = apply_selection(ex.extract(s.blended), cache).layers;
        e.normal = apply_selection(ex.extract(s.normal), cache).layers;
        e.mask = s.mask;
        return e;
    };
    if (cfg.train_pool > 0 && cfg.train_steps > 0) {
        size_t need = std::min<size_t>(static_cast<size_t>(cfg.train_pool),
                                       static_cast<size_t>(cfg.train_steps) * cfg.train_batch);
        for (size_t i = 0; i < need; ++i) pool.push_back(make_entry(i));
    }

    size_t index = 0;
    for (int step = 0; step < cfg.train_steps; ++step) {
        ReconBatch batch;
        for (int b = 0; b < cfg.train_batch; ++b, ++index) {
            if (!pool.empty()) {
                const PoolEntry& e = pool[index % pool.size()];
                batch.feats_anom.push_back(e.anom);
                batch.feats_normal.push_back(e.normal);
                batch.masks.push_back(e.mask);
            } else {
                PoolEntry e = make_entry(index);
                batch.feats_anom.push_back(std::move(e.anom));
                batch.feats_normal.push_back(std::move(e.normal));
                batch.masks.push_back(std::move(e.mask));
            }
        }
        auto out = train_pipeline_step(g, d, stats, batch, rc, og, od);
        rec_log.push_back(out.recon);
        seg_log.push_back(out.seg);
    }
    if (cfg.train_steps == 0) {
        // the standardizer must still carry statistics for eval mode
        AnomalySample s = synth_sample(ds.train, donors, sc, 1);
        FeatureStack fa = apply_selection(ex.extract(s.blended), cache);
        auto recon = g.reconstruct(fa.layers);
        assemble_residuals(fa.layers, recon, stats, true);
    }

    g.params().save(w / ("pipeline-" + dig + ".g.params"));
    d.params().save(w / ("pipeline-" + dig + ".d.params"));
    stats.save(w / ("pipeline-" + dig + ".stats.json"));
    json j{{"digest", dig}, {"afs", afs_dig}, {"recon", rec_log}, {"seg", seg_log}};
    std::ofstream os(res.artifact);
    os << j.dump(2) << "\n";
    return res;
}

namespace {

EvalReport report_from_json(const json& j) {
    EvalReport rep;
    auto get = [](const json& t) {
        MetricTriple m;
        m.image_auroc = t.at("image_auroc").get<double>();
        m.pixel_auroc = t.at("pixel_auroc").get<double>();
        m.pro = t.at("pro").get<double>();
        return m;
    };
    rep.overall = get(j.at("overall"));
    rep.positives = j.at("positives").get<int>();
    rep.negatives = j.at("negatives").get<int>();
    if (j.contains("config_digest")) rep.config_digest = j.at("config_digest").get<std::string>();
    if (j.contains("per_category"))
        for (const auto& [cat, t] : j.at("per_category").items()) rep.per_category[cat] = get(t);
    return rep;
}

}  // namespace

EvalReport cmd_eval(const PipelineConfig& cfg, StageResult* stage) {
    Dataset ds = load_dataset(cfg);
    if (ds.test.empty()) throw DataError("test split is empty under " + cfg.dataset_root);
    fs::path w = work_path(cfg);
    std::string synth_dig = synth_digest(cfg, diffusion_digest(cfg, ds));
    std::string afs_dig = afs_digest(cfg, ds, synth_dig);
    std::string train_dig = train_digest_of(cfg, afs_dig);
    fs::path meta = train_meta_path(w, train_dig);
    if (!fs::exists(meta)) throw ArtifactError("trained checkpoint missing: " + meta.string());

    json jeval{{"stage", "eval"}, {"train", train_dig}, {"test", ds.test_digest}};
    std::string dig = hash_text(jeval.dump());
    fs::path report_path = w / ("report-" + dig + ".json");
    if (stage) {
        stage->digest = dig;
        stage->artifact = report_path;
    }
    if (fs::exists(report_path)) {
        std::ifstream is(report_path);
        json j;
        is >> j;
        if (stage) stage->cache_hit = true;
        return report_from_json(j);
    }

    fs::path cache_path = w / ("afs-" + afs_dig + ".json");
    if (!fs::exists(cache_path))
        throw ArtifactError("feature selection cache missing: " + cache_path.string());
    AFSIndexCache cache = load_afs_cache(cache_path);

    FeatureExtractor ex = make_extractor(cfg);
    ScaleGeometry geo = scale_geometry(cfg);
    ReconstructorSet g =
        ReconstructorSet::build(cfg.m, geo.heights, geo.widths, cfg.recon_arch(), cfg.seed,
                                /*edge_pad=*/8);
    g.params().load_values_from(
        ParamSet<float>::load(w / ("pipeline-" + train_dig + ".g.params")));
    int m_total = 0;
    for (int v : cfg.m) m_total += v;
    RRSConfig rc = cfg.rrs();
    Discriminator d(rc.r_for(m_total), 128, cfg.seed);
    d.params().load_values_from(
        ParamSet<float>::load(w / ("pipeline-" + train_dig + ".d.params")));
    ResidualStandardizer stats;
    stats.load(w / ("pipeline-" + train_dig + ".stats.json"));

    fs::path maps_dir = w / ("maps-" + dig);
    fs::create_directories(maps_dir);
    std::ostringstream records;

    std::vector<ScoredImage> scored;
    for (const auto& ti : ds.test) {
        FeatureStack f = apply_selection(ex.extract(ti.image), cache);
        auto recon = g.reconstruct(f.layers);
        ResidualStack stack = assemble_residuals(f.layers, recon, stats, false);
        TensorF sel = rrs_select(stack.assembled, rc);
        ScoreMap map = discriminate(d, sel, cfg.image_size, cfg.image_size);

        ScoredImage si;
        si.category = ti.category;
        si.image_score = map.image_score;
        si.image_label = ti.label;
        si.score_map = stop_gradient(map.pixel);
        si.gt_mask = ti.mask;
        scored.push_back(si);

        std::string base = ti.category + "-" + ti.defect + "-" + ti.path.stem().string();
        save_pgm16(maps_dir / (base + ".pgm"), si.score_map);
        save_heat_overlay(maps_dir / (base + ".png"), ti.image, si.score_map);
        records << json{{"image", ti.path.string()},
                        {"category", ti.category},
                        {"defect", ti.defect},
                        {"score", map.image_score}}
                       .dump()
                << "\n";
    }
    {
        std::ofstream os(maps_dir / "records.jsonl");
        os << records.str();
    }

    EvalReport rep = evaluate_scores(scored);
    rep.config_digest = cfg.digest();
    {
        std::ofstream os(report_path);
        os << rep.to_json();
    }
    {
        std::ofstream os(w / ("report-" + dig + ".txt"));
        os << rep.to_table();
    }
    return rep;
}

}  // namespace anom
