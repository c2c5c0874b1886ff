#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "lcnn/cnn.hpp"
#include "lcnn/config.hpp"
#include "lcnn/eval.hpp"
#include "lcnn/lowlevel.hpp"
#include "lcnn/proposals.hpp"
#include "lcnn/saliency.hpp"
#include "lcnn/svm.hpp"

namespace lcnn {

/// How proposals are scored.
///  BaselineSoftmax: P(y=1) from the network without low-level embedding.
///  CnnSvm:          SVM on fc7 of that network.
///  CnnSpatialSvm:   SVM on p1-p30 + fc7 of the embedding network.
///  CnnContrastSvm:  SVM on c1-c74 + fc7 of the embedding network.
///  Lcnn:            SVM on all 104 low-level dims + fc7 of the embedding network.
enum class EmbeddingMode { BaselineSoftmax, CnnSvm, CnnSpatialSvm, CnnContrastSvm, Lcnn };

inline constexpr std::array<EmbeddingMode, 5> kAllModes = {EmbeddingMode::BaselineSoftmax, EmbeddingMode::CnnSvm,
                                                           EmbeddingMode::CnnSpatialSvm, EmbeddingMode::CnnContrastSvm,
                                                           EmbeddingMode::Lcnn};

std::string_view to_string(EmbeddingMode m);
EmbeddingMode embedding_mode_from_string(std::string_view name);

bool uses_svm(EmbeddingMode m);
/// True for the modes that concatenate low-level features, which use the
/// network with the narrower fc7.
bool uses_embedding_net(EmbeddingMode m);

struct FeatureSlice {
    int begin = 0;
    int end = 0;

    int size() const { return end - begin; }
};
/// Low-level dims consumed by a mode.
FeatureSlice lowlevel_slice(EmbeddingMode m);
/// Name of the SVM input concatenation, stored in the SVM file.
std::string feature_layout(EmbeddingMode m, int deep_dims);

struct ManifestRecord {
    std::string split;
    std::string id;
    std::filesystem::path image;
    std::filesystem::path gt;
};

/// CSV with header `split,image,gt`; paths are relative to the manifest.
struct DatasetManifest {
    std::vector<ManifestRecord> records;

    static DatasetManifest load(const std::filesystem::path& path);
    std::vector<ManifestRecord> split(std::string_view name) const;
};

struct PipelineConfig {
    std::filesystem::path manifest;
    std::filesystem::path work_dir = "work";
    std::filesystem::path output_dir = "out";
    std::uint64_t seed = 1;
    EmbeddingMode mode = EmbeddingMode::Lcnn;

    std::vector<SegConfig> segmentation = default_seg_configs();
    std::size_t proposal_cap = 2000;
    long min_box_area = 1000;
    double min_fill = 0.25;
    bool sliding_window = false;

    int strip = 20;

    std::string net_preset = "toy";
    double init_std = -1.0;  ///< negative keeps the preset's value
    TrainConfig train;
    int negatives_per_image = 32;
    bool augment = true;

    SvmParams svm;

    AccumTarget target = AccumTarget::Mask;
    double smooth_alpha = 0.5;

    bool verbose = true;
};

/// Reads every recognised key (see README) on top of the defaults above.
PipelineConfig pipeline_config(const KeyValueConfig& kv);

NetConfig net_config(const PipelineConfig& cfg, bool embedding);

/// Content-addressed cache locations for the current configuration.
struct StagePaths {
    std::filesystem::path proposals;
    std::filesystem::path cnn;
    std::filesystem::path features;
    std::filesystem::path svm;
    std::filesystem::path output;
};
StagePaths stage_paths(const PipelineConfig& cfg);

/// Per-image feature cache: for each stored proposal its index, the 104
/// low-level values and the fc7 activations.
struct FeatureFile {
    std::string image_id;
    int deep_dims = 0;
    std::vector<std::uint32_t> index;
    std::vector<Label> labels;
    std::vector<float> lowlevel;  ///< index.size() x kLowLevelDims
    std::vector<float> deep;      ///< index.size() x deep_dims
};

void write_features(const std::filesystem::path& path, const FeatureFile& f);
FeatureFile read_features(const std::filesystem::path& path);

/// Positives plus at most `negative_cap` seeded-random negatives, ascending.
std::vector<std::size_t> select_training(const ProposalSet& ps, int negative_cap, std::uint64_t seed);

/// Padded, warped RGB patch of a proposal box.
Image proposal_patch(const Image& rgb, const Box& box, int side);

void cmd_propose(const PipelineConfig& cfg);
void cmd_train_cnn(const PipelineConfig& cfg);
void cmd_features(const PipelineConfig& cfg);
void cmd_train_svm(const PipelineConfig& cfg);
void cmd_detect(const PipelineConfig& cfg);
EvalReport cmd_evaluate(const PipelineConfig& cfg);
/// All stages in order; cached stages are reused.
EvalReport cmd_run(const PipelineConfig& cfg);

/// Scores every proposal of one image for the configured mode.
std::vector<double> score_proposals(const PipelineConfig& cfg, const FeatureFile& features, const CnnModel* model,
                                    const SvmFile* svm);

} // namespace lcnn
