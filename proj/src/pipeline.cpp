#include "lcnn/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>

#include "lcnn/binary_io.hpp"
#include "lcnn/error.hpp"
#include "lcnn/parallel.hpp"

namespace lcnn {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Modes

std::string_view to_string(EmbeddingMode m) {
    switch (m) {
    case EmbeddingMode::BaselineSoftmax: return "baseline-softmax";
    case EmbeddingMode::CnnSvm: return "cnn-svm";
    case EmbeddingMode::CnnSpatialSvm: return "cnn-spatial-svm";
    case EmbeddingMode::CnnContrastSvm: return "cnn-contrast-svm";
    case EmbeddingMode::Lcnn: return "lcnn";
    }
    return "?";
}

EmbeddingMode embedding_mode_from_string(std::string_view name) {
    for (EmbeddingMode m : kAllModes)
        if (to_string(m) == name) return m;
    throw Error("unknown mode '" + std::string(name) +
                "' (expected baseline-softmax, cnn-svm, cnn-spatial-svm, cnn-contrast-svm or lcnn)");
}

bool uses_svm(EmbeddingMode m) { return m != EmbeddingMode::BaselineSoftmax; }

bool uses_embedding_net(EmbeddingMode m) {
    return m == EmbeddingMode::CnnSpatialSvm || m == EmbeddingMode::CnnContrastSvm || m == EmbeddingMode::Lcnn;
}

FeatureSlice lowlevel_slice(EmbeddingMode m) {
    switch (m) {
    case EmbeddingMode::CnnSpatialSvm: return {kContrastDims, kLowLevelDims};
    case EmbeddingMode::CnnContrastSvm: return {0, kContrastDims};
    case EmbeddingMode::Lcnn: return {0, kLowLevelDims};
    default: return {0, 0};
    }
}

std::string feature_layout(EmbeddingMode m, int deep_dims) {
    const FeatureSlice s = lowlevel_slice(m);
    std::string out;
    if (s.size() > 0) out = "lowlevel[" + std::to_string(s.begin) + ":" + std::to_string(s.end) + "]+";
    return out + "fc7[" + std::to_string(deep_dims) + "]";
}

// ---------------------------------------------------------------------------
// Manifest and configuration

DatasetManifest DatasetManifest::load(const fs::path& path) {
    const auto bytes = read_file(path);
    std::istringstream in(std::string(bytes.begin(), bytes.end()));
    const fs::path base = path.parent_path();
    DatasetManifest m;
    std::string line;
    int line_no = 0;
    std::set<std::string> ids;
    std::set<fs::path> train_images, test_images;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        if (line_no == 1 && line.rfind("split,", 0) == 0) continue;
        const auto c1 = line.find(','), c2 = line.find(',', c1 == std::string::npos ? c1 : c1 + 1);
        const std::string where = path.string() + ":" + std::to_string(line_no) + ": ";
        if (c1 == std::string::npos || c2 == std::string::npos) throw Error(where + "expected 'split,image,gt'");
        ManifestRecord r;
        r.split = line.substr(0, c1);
        if (r.split != "train" && r.split != "test") throw Error(where + "split must be train or test");
        r.image = base / line.substr(c1 + 1, c2 - c1 - 1);
        r.gt = base / line.substr(c2 + 1);
        r.id = r.image.stem().string();
        if (!fs::exists(r.image)) throw IoError(where + "image not found: " + r.image.string());
        if (!fs::exists(r.gt)) throw IoError(where + "ground truth not found: " + r.gt.string());
        if (!ids.insert(r.id).second) throw Error(where + "duplicate image id '" + r.id + "'");
        (r.split == "train" ? train_images : test_images).insert(fs::weakly_canonical(r.image));
        m.records.push_back(std::move(r));
    }
    for (const auto& p : train_images)
        if (test_images.count(p)) throw Error(path.string() + ": image in both splits: " + p.string());
    if (m.records.empty()) throw Error(path.string() + ": manifest lists no images");
    return m;
}

std::vector<ManifestRecord> DatasetManifest::split(std::string_view name) const {
    std::vector<ManifestRecord> out;
    for (const auto& r : records)
        if (r.split == name) out.push_back(r);
    return out;
}

PipelineConfig pipeline_config(const KeyValueConfig& kv) {
    PipelineConfig c;
    c.manifest = kv.get("manifest", "");
    c.work_dir = kv.get("work_dir", c.work_dir.string());
    c.output_dir = kv.get("output_dir", c.output_dir.string());
    c.seed = static_cast<std::uint64_t>(kv.get_long("seed", static_cast<long>(c.seed)));
    c.mode = embedding_mode_from_string(kv.get("mode", std::string(to_string(c.mode))));
    c.verbose = kv.get_bool("verbose", c.verbose);

    const auto spaces = kv.get_list("segmentation.spaces", {"rgb", "lab", "hsv"});
    const auto ks = kv.get_list("segmentation.k", {"100", "200"});
    const int min_size = kv.get_int("segmentation.min_size", 50);
    const double sigma = kv.get_double("segmentation.sigma", 0.8);
    c.segmentation.clear();
    for (const auto& s : spaces)
        for (const auto& k : ks) {
            KeyValueConfig one;
            one.set("k", k);
            c.segmentation.push_back({color_space_from_string(s), one.get_double("k", 0.0), min_size, sigma});
        }
    if (c.segmentation.empty()) throw Error("segmentation needs at least one colour space and scale");

    c.proposal_cap = static_cast<std::size_t>(kv.get_long("proposals.cap", static_cast<long>(c.proposal_cap)));
    c.min_box_area = kv.get_long("proposals.min_box_area", c.min_box_area);
    c.min_fill = kv.get_double("proposals.min_fill", c.min_fill);
    c.sliding_window = kv.get_bool("proposals.sliding_window", c.sliding_window);
    c.strip = kv.get_int("features.strip", c.strip);

    c.net_preset = kv.get("cnn.preset", c.net_preset);
    c.init_std = kv.get_double("cnn.init_std", c.init_std);
    c.train.batch = kv.get_int("cnn.batch", c.train.batch);
    c.train.momentum = kv.get_double("cnn.momentum", c.train.momentum);
    c.train.weight_decay = kv.get_double("cnn.weight_decay", c.train.weight_decay);
    c.train.learning_rate = kv.get_double("cnn.learning_rate", c.train.learning_rate);
    c.train.lr_decay = kv.get_double("cnn.lr_decay", c.train.lr_decay);
    c.train.patience = kv.get_int("cnn.patience", c.train.patience);
    c.train.epochs = kv.get_int("cnn.epochs", c.train.epochs);
    c.train.seed = c.seed;
    c.negatives_per_image = kv.get_int("cnn.negatives_per_image", c.negatives_per_image);
    c.augment = kv.get_bool("cnn.augment", c.augment);

    c.svm.C = kv.get_double("svm.C", c.svm.C);
    c.svm.epochs = kv.get_int("svm.epochs", c.svm.epochs);
    c.svm.batch = kv.get_int("svm.batch", c.svm.batch);
    c.svm.seed = c.seed;

    const std::string target = kv.get("saliency.target", "mask");
    if (target == "mask") c.target = AccumTarget::Mask;
    else if (target == "box") c.target = AccumTarget::Box;
    else throw Error("saliency.target must be mask or box");
    c.smooth_alpha = kv.get_double("saliency.smooth", c.smooth_alpha);

    if (c.proposal_cap < 1) throw Error("proposals.cap must be positive");
    if (c.negatives_per_image < 0) throw Error("cnn.negatives_per_image must be non-negative");
    if (c.smooth_alpha < 0.0 || c.smooth_alpha > 1.0) throw Error("saliency.smooth must lie in [0, 1]");
    return c;
}

NetConfig net_config(const PipelineConfig& cfg, bool embedding) {
    NetConfig n;
    if (cfg.net_preset == "toy") n = toy_preset(embedding);
    else if (cfg.net_preset == "alexnet") n = alexnet_preset(embedding);
    else throw Error("unknown network preset '" + cfg.net_preset + "' (expected toy or alexnet)");
    if (cfg.init_std >= 0.0) n.init_std = cfg.init_std;
    return n;
}

// ---------------------------------------------------------------------------
// Cache keys

namespace {

std::string num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string proposals_desc(const PipelineConfig& c) {
    std::string s = "proposals/v1 manifest=" + fs::weakly_canonical(c.manifest).string();
    if (c.sliding_window) s += " sliding";
    else
        for (const auto& sc : c.segmentation)
            s += " seg=" + std::string(to_string(sc.cs)) + "," + num(sc.k) + "," + std::to_string(sc.min_size) + "," + num(sc.sigma);
    s += " cap=" + std::to_string(c.proposal_cap) + " min_box_area=" + std::to_string(c.min_box_area) +
         " min_fill=" + num(c.min_fill);
    return s;
}

std::string cnn_desc(const PipelineConfig& c, bool embedding) {
    const NetConfig n = net_config(c, embedding);
    return proposals_desc(c) + " | cnn/v1 preset=" + n.name + " init=" + num(n.init_std) +
           " batch=" + std::to_string(c.train.batch) + " mom=" + num(c.train.momentum) +
           " wd=" + num(c.train.weight_decay) + " lr=" + num(c.train.learning_rate) + " decay=" + num(c.train.lr_decay) +
           " patience=" + std::to_string(c.train.patience) + " epochs=" + std::to_string(c.train.epochs) +
           " neg=" + std::to_string(c.negatives_per_image) + " augment=" + (c.augment ? "1" : "0") +
           " seed=" + std::to_string(c.seed);
}

std::string features_desc(const PipelineConfig& c, bool embedding) {
    return cnn_desc(c, embedding) + " | features/v1 strip=" + std::to_string(c.strip);
}

std::string svm_desc(const PipelineConfig& c) {
    return features_desc(c, uses_embedding_net(c.mode)) + " | svm/v1 mode=" + std::string(to_string(c.mode)) +
           " C=" + num(c.svm.C) + " epochs=" + std::to_string(c.svm.epochs) + " batch=" + std::to_string(c.svm.batch);
}

fs::path keyed(const fs::path& root, const std::string& stage, const std::string& desc) {
    return root / stage / hex64(fnv1a(desc));
}

bool stage_done(const fs::path& dir) { return fs::exists(dir / "DONE"); }

void mark_done(const fs::path& dir, const std::string& desc) {
    write_file_atomic(dir / "config.txt", desc + "\n");
    write_file_atomic(dir / "DONE", std::string_view("ok\n"));
}

void require(const fs::path& dir, const char* stage) {
    if (!stage_done(dir))
        throw Error("missing artifact " + dir.string() + " (run '" + stage + "' with the same configuration first)");
}

void note(const PipelineConfig& cfg, const std::string& msg) {
    if (cfg.verbose) std::fprintf(stderr, "[lcnn] %s\n", msg.c_str());
}

DatasetManifest manifest_of(const PipelineConfig& cfg) {
    if (cfg.manifest.empty()) throw Error("no dataset manifest configured");
    return DatasetManifest::load(cfg.manifest);
}

fs::path proposal_file(const StagePaths& sp, const std::string& id) { return sp.proposals / (id + ".prop"); }
fs::path feature_file(const StagePaths& sp, const std::string& id) { return sp.features / (id + ".feat"); }

// Every tenth training image is held out to drive the learning-rate schedule.
bool is_validation(std::size_t train_index) { return train_index % 10 == 9; }

} // namespace

StagePaths stage_paths(const PipelineConfig& cfg) {
    const bool emb = uses_embedding_net(cfg.mode);
    StagePaths sp;
    sp.proposals = keyed(cfg.work_dir, "proposals", proposals_desc(cfg));
    sp.cnn = keyed(cfg.work_dir, "cnn", cnn_desc(cfg, emb));
    sp.features = keyed(cfg.work_dir, "features", features_desc(cfg, emb));
    sp.svm = keyed(cfg.work_dir, "svm", svm_desc(cfg));
    sp.output = cfg.output_dir / (std::string(to_string(cfg.mode)) + (cfg.sliding_window ? "-sliding" : ""));
    return sp;
}

// ---------------------------------------------------------------------------
// Feature files

namespace {
constexpr std::uint16_t kFeatureVersion = 1;
}

void write_features(const fs::path& path, const FeatureFile& f) {
    const std::size_t n = f.index.size();
    if (f.labels.size() != n || f.lowlevel.size() != n * kLowLevelDims || f.deep.size() != n * f.deep_dims)
        throw Error("write_features: inconsistent feature arrays");
    BinaryWriter w;
    w.magic("LCNNFEAT");
    w.u16(kFeatureVersion);
    w.str(f.image_id);
    w.u32(static_cast<std::uint32_t>(n));
    w.u32(kLowLevelDims);
    w.u32(static_cast<std::uint32_t>(f.deep_dims));
    for (std::size_t i = 0; i < n; ++i) {
        w.u32(f.index[i]);
        w.u8(static_cast<std::uint8_t>(f.labels[i]));
        w.f32_array(std::span<const float>(f.lowlevel.data() + i * kLowLevelDims, kLowLevelDims));
        w.f32_array(std::span<const float>(f.deep.data() + i * f.deep_dims, f.deep_dims));
    }
    write_file_atomic(path, w.bytes());
}

FeatureFile read_features(const fs::path& path) {
    BinaryReader r(read_file(path), path.string());
    r.expect_magic("LCNNFEAT");
    const auto version = r.u16();
    if (version != kFeatureVersion)
        throw FormatError(path.string() + ": unsupported feature version " + std::to_string(version));
    FeatureFile f;
    f.image_id = r.str();
    const std::size_t n = r.u32();
    if (r.u32() != kLowLevelDims) throw FormatError(path.string() + ": unexpected low-level dimension");
    f.deep_dims = static_cast<int>(r.u32());
    f.index.resize(n);
    f.labels.resize(n);
    f.lowlevel.reserve(n * kLowLevelDims);
    f.deep.reserve(n * f.deep_dims);
    for (std::size_t i = 0; i < n; ++i) {
        f.index[i] = r.u32();
        const auto lab = r.u8();
        if (lab > 3) throw FormatError(path.string() + ": invalid label byte");
        f.labels[i] = static_cast<Label>(lab);
        const auto low = r.f32_array(kLowLevelDims);
        f.lowlevel.insert(f.lowlevel.end(), low.begin(), low.end());
        const auto deep = r.f32_array(static_cast<std::size_t>(f.deep_dims));
        f.deep.insert(f.deep.end(), deep.begin(), deep.end());
    }
    if (!r.at_end()) throw FormatError(path.string() + ": trailing bytes");
    return f;
}

std::vector<std::size_t> select_training(const ProposalSet& ps, int negative_cap, std::uint64_t seed) {
    std::vector<std::size_t> pos, neg;
    for (std::size_t i = 0; i < ps.proposals.size(); ++i) {
        if (ps.proposals[i].label == Label::Positive) pos.push_back(i);
        if (ps.proposals[i].label == Label::Negative) neg.push_back(i);
    }
    std::mt19937_64 rng(fnv1a(ps.image_id, seed));
    std::shuffle(neg.begin(), neg.end(), rng);
    if (neg.size() > static_cast<std::size_t>(negative_cap)) neg.resize(static_cast<std::size_t>(negative_cap));
    pos.insert(pos.end(), neg.begin(), neg.end());
    std::sort(pos.begin(), pos.end());
    return pos;
}

Image proposal_patch(const Image& rgb, const Box& box, int side) {
    return warp_bilinear(rgb, pad_box(box, context_for_side(side), rgb.width(), rgb.height()), side);
}

// ---------------------------------------------------------------------------
// Stages

void cmd_propose(const PipelineConfig& cfg) {
    const StagePaths sp = stage_paths(cfg);
    if (stage_done(sp.proposals)) {
        note(cfg, "proposals cached in " + sp.proposals.string());
        return;
    }
    const auto manifest = manifest_of(cfg);
    note(cfg, "proposing regions for " + std::to_string(manifest.records.size()) + " images");
    fs::create_directories(sp.proposals);
    parallel_for(manifest.records.size(), [&](std::size_t i) {
        const auto& rec = manifest.records[i];
        const Image rgb = load_image(rec.image);
        const RegionMask gt = load_gt_mask(rec.gt);
        if (gt.width() != rgb.width() || gt.height() != rgb.height())
            throw Error(rec.gt.string() + ": ground truth size differs from the image");
        ProposalSet raw = cfg.sliding_window
                              ? sliding_window_proposals(rgb.width(), rgb.height(), std::numeric_limits<std::size_t>::max())
                              : selective_search(rgb, cfg.segmentation, std::numeric_limits<std::size_t>::max());
        raw.image_id = rec.id;
        ProposalSet ps = filter_proposals(raw, cfg.min_box_area, cfg.min_fill);
        std::erase_if(ps.proposals, [](const Proposal& p) { return !has_interior_pixel(p.mask); });
        if (ps.proposals.size() > cfg.proposal_cap) ps.proposals.resize(cfg.proposal_cap);
        ps.cap = cfg.proposal_cap;
        assign_labels(ps, gt);
        write_proposals(proposal_file(sp, rec.id), ps);
    });
    mark_done(sp.proposals, proposals_desc(cfg));
}

namespace {

struct TrainSample {
    std::uint32_t image;
    Box box;
    std::uint8_t variant;
};

} // namespace

void cmd_train_cnn(const PipelineConfig& cfg) {
    const StagePaths sp = stage_paths(cfg);
    const bool emb = uses_embedding_net(cfg.mode);
    if (stage_done(sp.cnn)) {
        note(cfg, "network cached in " + sp.cnn.string());
        return;
    }
    require(sp.proposals, "propose");
    const auto train_records = manifest_of(cfg).split("train");
    if (train_records.empty()) throw Error("manifest has no training images");

    std::vector<Image> images(train_records.size());
    std::vector<std::vector<std::pair<Box, int>>> picked(train_records.size());
    parallel_for(train_records.size(), [&](std::size_t i) {
        images[i] = load_image(train_records[i].image);
        const ProposalSet ps = read_proposals(proposal_file(sp, train_records[i].id));
        for (std::size_t j : select_training(ps, cfg.negatives_per_image, cfg.seed))
            picked[i].push_back({ps.proposals[j].box, ps.proposals[j].label == Label::Positive ? 1 : 0});
    });

    std::vector<TrainSample> train_s, val_s;
    std::vector<int> train_y, val_y;
    const int variants = cfg.augment ? kAugmentVariants : 1;
    for (std::size_t i = 0; i < picked.size(); ++i)
        for (const auto& [box, y] : picked[i]) {
            if (is_validation(i)) {
                val_s.push_back({static_cast<std::uint32_t>(i), box, 0});
                val_y.push_back(y);
                continue;
            }
            for (int v = 0; v < variants; ++v) {
                train_s.push_back({static_cast<std::uint32_t>(i), box, static_cast<std::uint8_t>(v)});
                train_y.push_back(y);
            }
        }
    const long positives = std::count(train_y.begin(), train_y.end(), 1);
    if (positives == 0 || positives == static_cast<long>(train_y.size()))
        throw Error("training proposals contain a single class; adjust proposal filters or the dataset");

    CnnModel model;
    model.net = Network<float>(net_config(cfg, emb), cfg.seed);
    const int side = model.net.config().input_side;
    const int in = model.net.input_size();

    // Per-pixel mean over the un-augmented training patches.
    {
        std::vector<std::size_t> base;
        for (std::size_t s = 0; s < train_s.size(); ++s)
            if (train_s[s].variant == 0) base.push_back(s);
        std::vector<std::vector<double>> partial(8, std::vector<double>(static_cast<std::size_t>(in), 0.0));
        parallel_for(partial.size(), [&](std::size_t ch) {
            for (std::size_t k = ch; k < base.size(); k += partial.size()) {
                const TrainSample& t = train_s[base[k]];
                const Image patch = proposal_patch(images[t.image], t.box, side);
                const auto& d = patch.data();
                for (int j = 0; j < in; ++j) partial[ch][j] += d[j];
            }
        });
        model.mean.assign(static_cast<std::size_t>(in), 0.0f);
        for (int j = 0; j < in; ++j) {
            double s = 0.0;
            for (const auto& p : partial) s += p[j];
            model.mean[j] = static_cast<float>(s / static_cast<double>(base.size()));
        }
    }

    auto make_fill = [&](const std::vector<TrainSample>& samples) {
        return [&images, &model, &samples, side](std::size_t i, std::span<float> out) {
            const TrainSample& t = samples[i];
            const Image patch = augment_variant(proposal_patch(images[t.image], t.box, side), t.variant);
            model.prepare_input(patch, out);
        };
    };
    TrainingData train{train_s.size(), train_y, make_fill(train_s)};
    TrainingData val{val_s.size(), val_y, make_fill(val_s)};

    note(cfg, "training " + model.net.config().name + " network on " + std::to_string(train_s.size()) + " samples (" +
                  std::to_string(positives) + " positive), " + std::to_string(val_s.size()) + " held out");
    std::string log = "epoch,train_loss,val_loss,lr\n";
    const auto start = std::chrono::steady_clock::now();
    train_network(model.net, cfg.train, train, val.count > 0 ? &val : nullptr, [&](const EpochLog& e) {
        char line[160];
        std::snprintf(line, sizeof line, "%d,%.6f,%.6f,%.6g\n", e.epoch, e.train_loss, e.val_loss, e.learning_rate);
        log += line;
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        char msg[200];
        std::snprintf(msg, sizeof msg, "epoch %d loss %.4f val %.4f lr %.3g (%.0fs)", e.epoch, e.train_loss, e.val_loss,
                      e.learning_rate, secs);
        note(cfg, msg);
    });
    fs::create_directories(sp.cnn);
    save_model(sp.cnn / "model.lcnn", model);
    write_file_atomic(sp.cnn / "train_log.csv", log);
    const FilterGrid grid = export_first_layer_filters(model.net);
    save_png_rgb(sp.cnn / "filters.png", grid.image);
    mark_done(sp.cnn, cnn_desc(cfg, emb));
}

void cmd_features(const PipelineConfig& cfg) {
    const StagePaths sp = stage_paths(cfg);
    const bool emb = uses_embedding_net(cfg.mode);
    if (stage_done(sp.features)) {
        note(cfg, "features cached in " + sp.features.string());
        return;
    }
    require(sp.proposals, "propose");
    require(sp.cnn, "train-cnn");
    const CnnModel model = load_model(sp.cnn / "model.lcnn");
    const auto manifest = manifest_of(cfg);
    const int side = model.net.config().input_side;
    const int in = model.net.input_size();
    const int D = model.net.feature_dim();
    fs::create_directories(sp.features);
    note(cfg, "extracting features for " + std::to_string(manifest.records.size()) + " images");

    for (const auto& rec : manifest.records) {
        const bool train = rec.split == "train";
        const Image rgb = load_image(rec.image);
        const ProposalSet ps = read_proposals(proposal_file(sp, rec.id));
        std::vector<std::size_t> chosen;
        if (train) chosen = select_training(ps, cfg.negatives_per_image, cfg.seed);
        else {
            chosen.resize(ps.proposals.size());
            std::iota(chosen.begin(), chosen.end(), std::size_t{0});
        }
        FeatureFile f;
        f.image_id = rec.id;
        f.deep_dims = D;
        const std::size_t n = chosen.size();
        f.index.resize(n);
        f.labels.resize(n);
        f.lowlevel.resize(n * kLowLevelDims);
        f.deep.resize(n * D);
        if (n > 0) {
            const ImageContext ctx = prepare_image(rgb, cfg.strip);
            parallel_for(n, [&](std::size_t k) {
                const Proposal& p = ps.proposals[chosen[k]];
                f.index[k] = static_cast<std::uint32_t>(chosen[k]);
                f.labels[k] = p.label;
                const LowLevelVec v = extract_lowlevel(ctx, p);
                for (int j = 0; j < kLowLevelDims; ++j) f.lowlevel[k * kLowLevelDims + j] = static_cast<float>(v[j]);
            });
            constexpr std::size_t kChunk = 256;
            std::vector<float> inputs;
            for (std::size_t start = 0; start < n; start += kChunk) {
                const std::size_t m = std::min(kChunk, n - start);
                inputs.assign(m * in, 0.0f);
                parallel_for(m, [&](std::size_t k) {
                    const Image patch = proposal_patch(rgb, ps.proposals[chosen[start + k]].box, side);
                    model.prepare_input(patch, std::span<float>(inputs.data() + k * in, in));
                });
                const auto fc7 = extract_fc7(model, inputs, static_cast<int>(m));
                std::copy(fc7.begin(), fc7.end(), f.deep.begin() + static_cast<std::ptrdiff_t>(start * D));
            }
        }
        write_features(feature_file(sp, rec.id), f);
    }
    mark_done(sp.features, features_desc(cfg, emb));
}

namespace {

std::vector<double> svm_input(const FeatureFile& f, std::size_t k, EmbeddingMode mode) {
    const FeatureSlice s = lowlevel_slice(mode);
    std::vector<double> x;
    x.reserve(static_cast<std::size_t>(s.size() + f.deep_dims));
    for (int j = s.begin; j < s.end; ++j) x.push_back(f.lowlevel[k * kLowLevelDims + j]);
    for (int j = 0; j < f.deep_dims; ++j) x.push_back(f.deep[k * f.deep_dims + j]);
    return x;
}

} // namespace

void cmd_train_svm(const PipelineConfig& cfg) {
    if (!uses_svm(cfg.mode)) {
        note(cfg, std::string(to_string(cfg.mode)) + " scores with the network classifier; no SVM to train");
        return;
    }
    const StagePaths sp = stage_paths(cfg);
    if (stage_done(sp.svm)) {
        note(cfg, "SVM cached in " + sp.svm.string());
        return;
    }
    require(sp.features, "features");
    const auto records = manifest_of(cfg).split("train");
    std::vector<FeatureFile> files(records.size());
    parallel_for(records.size(), [&](std::size_t i) { files[i] = read_features(feature_file(sp, records[i].id)); });

    int D = -1;
    std::size_t rows = 0;
    for (const auto& f : files) {
        if (D >= 0 && f.deep_dims != D) throw FormatError("feature files disagree on the fc7 dimension");
        D = f.deep_dims;
        for (Label l : f.labels) rows += (l == Label::Positive || l == Label::Negative);
    }
    const int dims = lowlevel_slice(cfg.mode).size() + std::max(D, 0);
    Matrix X(rows, static_cast<std::size_t>(dims));
    std::vector<int> y;
    y.reserve(rows);
    for (const auto& f : files)
        for (std::size_t k = 0; k < f.index.size(); ++k) {
            if (f.labels[k] != Label::Positive && f.labels[k] != Label::Negative) continue;
            const auto x = svm_input(f, k, cfg.mode);
            std::copy(x.begin(), x.end(), X.row(y.size()).begin());
            y.push_back(f.labels[k] == Label::Positive ? 1 : -1);
        }
    note(cfg, "training SVM (" + feature_layout(cfg.mode, D) + ") on " + std::to_string(rows) + " proposals");
    SvmFile out;
    out.layout = feature_layout(cfg.mode, D);
    out.standardizer = standardize_fit(X);
    out.model = svm_train(out.standardizer.apply(X), y, cfg.svm);
    fs::create_directories(sp.svm);
    save_svm(sp.svm / "model.svm", out);
    mark_done(sp.svm, svm_desc(cfg));
}

std::vector<double> score_proposals(const PipelineConfig& cfg, const FeatureFile& features, const CnnModel* model,
                                    const SvmFile* svm) {
    const std::size_t n = features.index.size();
    std::vector<double> scores(n);
    if (!uses_svm(cfg.mode)) {
        if (!model) throw Error("softmax scoring needs the trained network");
        const auto p = classifier_probability(model->net, features.deep, static_cast<int>(n));
        std::copy(p.begin(), p.end(), scores.begin());
        return scores;
    }
    if (!svm) throw Error("SVM scoring needs a trained SVM");
    if (svm->layout != feature_layout(cfg.mode, features.deep_dims))
        throw FormatError("SVM was trained on '" + svm->layout + "' but mode " + std::string(to_string(cfg.mode)) +
                          " provides '" + feature_layout(cfg.mode, features.deep_dims) + "'");
    for (std::size_t k = 0; k < n; ++k) {
        auto x = svm_input(features, k, cfg.mode);
        svm->standardizer.apply(x);
        scores[k] = svm_score(svm->model, x);
    }
    return scores;
}

void cmd_detect(const PipelineConfig& cfg) {
    const StagePaths sp = stage_paths(cfg);
    require(sp.proposals, "propose");
    require(sp.features, "features");
    std::optional<CnnModel> model;
    std::optional<SvmFile> svm;
    if (uses_svm(cfg.mode)) {
        require(sp.svm, "train-svm");
        svm = load_svm(sp.svm / "model.svm");
    } else {
        require(sp.cnn, "train-cnn");
        model = load_model(sp.cnn / "model.lcnn");
    }
    const auto records = manifest_of(cfg).split("test");
    if (records.empty()) throw Error("manifest has no test images");
    fs::create_directories(sp.output / "maps");
    note(cfg, "detecting saliency on " + std::to_string(records.size()) + " test images (" + std::string(to_string(cfg.mode)) + ")");
    parallel_for(records.size(), [&](std::size_t i) {
        const auto& rec = records[i];
        const ProposalSet ps = read_proposals(proposal_file(sp, rec.id));
        const FeatureFile f = read_features(feature_file(sp, rec.id));
        if (f.index.size() != ps.proposals.size()) throw FormatError(rec.id + ": feature file does not cover every proposal");
        const auto scores = score_proposals(cfg, f, model ? &*model : nullptr, svm ? &*svm : nullptr);
        SaliencyMap map = normalize(accumulate(ps, scores, cfg.target));
        if (cfg.smooth_alpha > 0.0) {
            const SegConfig& sc = cfg.segmentation.front();
            const Image rgb = load_image(rec.image);
            const Segmentation seg = segment_graph(convert(rgb, sc.cs), sc.k, sc.min_size, sc.sigma);
            map = smooth(map, seg, cfg.smooth_alpha);
        }
        save_saliency_png(sp.output / "maps" / (rec.id + ".png"), map);
    });
}

EvalReport cmd_evaluate(const PipelineConfig& cfg) {
    const StagePaths sp = stage_paths(cfg);
    const auto records = manifest_of(cfg).split("test");
    if (records.empty()) throw Error("manifest has no test images");
    std::vector<SaliencyMap> maps(records.size());
    std::vector<RegionMask> gts(records.size());
    std::vector<std::string> ids(records.size());
    parallel_for(records.size(), [&](std::size_t i) {
        const fs::path map_path = sp.output / "maps" / (records[i].id + ".png");
        if (!fs::exists(map_path)) throw Error("missing saliency map " + map_path.string() + " (run 'detect' first)");
        maps[i] = load_saliency_png(map_path);
        gts[i] = load_gt_mask(records[i].gt);
        ids[i] = records[i].id;
    });
    const EvalReport report = evaluate_dataset(maps, gts, ids);
    write_pr_csv(sp.output / "pr_curve.csv", report.pr);
    write_report_csv(sp.output / "report.csv", report);
    char msg[160];
    std::snprintf(msg, sizeof msg, "%s: mean F %.4f, MAE %.4f", std::string(to_string(cfg.mode)).c_str(), report.f_measure,
                  report.mae);
    note(cfg, msg);
    return report;
}

EvalReport cmd_run(const PipelineConfig& cfg) {
    cmd_propose(cfg);
    cmd_train_cnn(cfg);
    cmd_features(cfg);
    cmd_train_svm(cfg);
    cmd_detect(cfg);
    return cmd_evaluate(cfg);
}

} // namespace lcnn
