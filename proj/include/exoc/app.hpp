#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "exoc/datagen.hpp"
#include "exoc/dataset.hpp"
#include "exoc/metrics.hpp"
#include "exoc/trainer.hpp"

namespace exoc::app {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

const char* version();

/// Entry point shared by the executable and the tests. Returns the process
/// exit code; diagnostics go to stderr.
int run(int argc, const char* const* argv);

// A generated dataset directory: train.csv (observed pairs), test.csv
// (unbiased test pairs), features.csv (x for every pair) and meta.json.
struct DatasetDirInfo {
  std::size_t users = 0;
  std::size_t items = 0;
  LabelKind label_mode = LabelKind::continuous;
  double rho = 0.0;
  double beta = 0.0;
  double sparsity = 0.0;
  std::uint64_t seed = 0;
  double test_fraction = 0.0;
};

struct GenerateOptions {
  SynthSpec spec;
  // Fraction of D in the unbiased test set; 0 selects half the achieved
  // sparsity, i.e. a test set about half the size of O.
  double test_fraction = 0.0;
};

/// Generates, splits and writes a dataset directory. Output bytes depend only
/// on the options.
DatasetDirInfo write_generated(const GenerateOptions& opts, const std::filesystem::path& dir);

struct DataSource {
  std::filesystem::path dir;         // generated dataset directory
  std::filesystem::path train_file;  // or raw triple files
  std::filesystem::path test_file;
  std::string binarize = "none";

  bool is_dir() const { return !dir.empty(); }
  /// Input files whose digests go into manifests.
  std::vector<std::filesystem::path> input_files() const;
};

struct LoadedSource {
  InteractionDataset train;
  std::vector<Interaction> test;
  std::vector<std::string> warnings;
};

LoadedSource load_source(const DataSource& src);

struct TrainOptions {
  DataSource data;
  TrainConfig cfg;
  std::size_t k = 5;
};

struct RunOutcome {
  TrainResult result;
  EvalReport report;
};

/// Trains and evaluates in memory.
RunOutcome train_and_evaluate(const LoadedSource& data, const TrainOptions& opts);

/// Deterministic key=value run summary (no timings).
std::string summary_text(const TrainOptions& opts, const RunOutcome& out);

/// Flat "key=value" config text; '#' starts a comment line.
std::map<std::string, std::string> read_flat_config(const std::filesystem::path& path);

/// Hex CRC-32 of a file's bytes.
std::string file_digest(const std::filesystem::path& path);

}  // namespace exoc::app
