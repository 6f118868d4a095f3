#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "akd/corpus.hpp"
#include "akd/distill.hpp"
#include "akd/model.hpp"
#include "akd/synthetic.hpp"
#include "akd/train.hpp"

namespace akd {

// A teacher is trained on one high-resource language, then fine-tuned on
// the low-resource pair. Epoch overrides make deliberately weak teachers.
struct TeacherSpec {
    std::string language;
    std::optional<std::size_t> train_epochs;
    std::optional<std::size_t> finetune_epochs;
};

// One distilled student: which teachers vote and how. Unset fields fall
// back to the experiment's distill block.
struct SystemSpec {
    std::string name;
    std::vector<std::string> teachers;
    std::optional<ContributionMode> contribution;
    std::optional<TemperatureMode> temperature;
    std::optional<bool> smoothing;
};

struct FileCorpusSpec {
    std::string name;
    std::string train;  // path prefix: <prefix>.src / <prefix>.tgt
    std::string dev;
    std::string test;
};

struct ExperimentConfig {
    std::string name = "experiment";
    std::vector<std::uint64_t> seeds = {1};

    // Either a synthetic family or corpus files on disk.
    bool synthetic = true;
    FamilySpec family;
    std::size_t dev_size = 200;
    std::size_t test_size = 200;
    std::vector<FileCorpusSpec> files;

    std::string low_resource;
    std::size_t min_freq = 1;
    double max_length_ratio = 1.5;

    ModelConfig model;  // vocab_size is filled in from the data
    TrainConfig teacher_train;
    TrainConfig finetune;
    TrainConfig student_train;
    DistillConfig distill;
    std::vector<TeacherSpec> teachers;
    std::vector<SystemSpec> systems;

    void validate() const;
    DistillConfig system_distill(const SystemSpec& system) const;
};

// Single-stage commands only need the model, training and distill blocks.
enum class ConfigScope { Pipeline, Stage };

// JSON with // and /* */ comments. Unknown keys are rejected.
ExperimentConfig parse_experiment(std::string_view text, ConfigScope scope = ConfigScope::Pipeline);
ExperimentConfig load_experiment(const std::filesystem::path& path);
// Canonical JSON of the effective configuration.
std::string experiment_to_json(const ExperimentConfig& config);
// First 12 hex digits of FNV-1a over the canonical JSON.
std::string config_hash(const ExperimentConfig& config);

// Command-line ablation switches. They replace the experiment's distill
// settings; a system that sets a field itself keeps its own value.
struct AblationOverrides {
    std::optional<ContributionMode> contribution;
    std::optional<TemperatureMode> temperature;
    bool no_smoothing = false;
};
void apply_overrides(ExperimentConfig& config, const AblationOverrides& overrides);

struct LanguageSplits {
    TextCorpus train, dev, test;
};

struct PreparedData {
    Vocabulary vocab;
    std::map<std::string, LanguageSplits> text;
    std::map<std::string, ParallelCorpus> train, dev, test;
    std::map<std::string, EncodeReport> reports;  // train split only
};

// Generates (or reads) every language's splits for one seed and builds the
// shared vocabulary over all training corpora.
PreparedData prepare_data(const ExperimentConfig& config, std::uint64_t seed);
// <dir>/<lang>.<split>.{src,tgt} and <dir>/vocab.txt
void write_data(const PreparedData& data, const std::filesystem::path& dir);

struct ResultRow {
    std::string system;
    std::string pair;
    std::uint64_t seed = 0;
    double bleu = 0.0;
    double dev_ppl = 0.0;
    double test_ppl = 0.0;
    std::string run_dir;
    bool median = false;  // aggregate over seeds
};

struct ResultsTable {
    std::vector<ResultRow> rows;
    // System names in first-seen order.
    std::vector<std::string> systems() const;
    std::vector<ResultRow> median_rows() const;
    void write_csv(const std::filesystem::path& path) const;
    // Seeds down, systems across, BLEU cells, median row last.
    std::string aligned_text() const;
};

double median(std::vector<double> values);

struct PipelineOptions {
    std::filesystem::path out_dir = "runs";
    std::string config_text;  // copied verbatim into each run directory
    std::function<void(const std::string&)> log;
};

struct SeedRun {
    std::filesystem::path dir;
    std::vector<ResultRow> rows;
    std::map<std::string, std::vector<TraceRow>> traces;  // per distilled system
    std::map<std::string, std::uint64_t> teacher_checksums_before, teacher_checksums_after;
};

std::filesystem::path run_directory(const ExperimentConfig& config, std::uint64_t seed,
                                    const std::filesystem::path& out_dir);

// Teachers -> fine-tuning -> individual baseline -> every system, for one
// seed. A failing stage raises the original error kind with the stage named;
// files written before the failure stay on disk.
SeedRun run_pipeline_seed(const ExperimentConfig& config, std::uint64_t seed, const PipelineOptions& options);

// All seeds, then <out>/<hash>-summary/results.{csv,txt}.
ResultsTable run_pipeline(const ExperimentConfig& config, const PipelineOptions& options,
                          std::vector<SeedRun>* runs = nullptr);

// Long format for plotting: iteration, teacher, weight_raw, weight_smoothed.
struct LongTraceRow {
    std::size_t iteration = 0;
    std::size_t teacher = 0;
    double weight_raw = 0.0;
    double weight_smoothed = 0.0;
};
std::vector<LongTraceRow> trace_long_format(std::span<const TraceRow> rows);
void write_long_trace(const std::filesystem::path& path, std::span<const LongTraceRow> rows);
// Writes trace_long.csv and trace_first30.csv into `out_dir`; returns the
// number of long rows.
std::size_t export_trace(const std::filesystem::path& trace_csv, const std::filesystem::path& out_dir);

}  // namespace akd
