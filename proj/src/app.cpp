#include "exoc/app.hpp"

#include <zlib.h>

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iostream>
#include <limits>
#include <mutex>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "exoc/error.hpp"
#include "exoc/kernels.hpp"
#include "exoc/numkernel.hpp"
#include "json.hpp"

namespace exoc::app {
namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

#ifndef EXOC_VERSION
#define EXOC_VERSION "0.0.0"
#endif

const char* version() { return EXOC_VERSION; }

namespace {

constexpr std::uint64_t kTestSplitSalt = 0x74657374ULL;

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("failed writing " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot read " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void require_file(const fs::path& path, const char* what) {
  if (!fs::is_regular_file(path)) throw ValidationError(std::string(what) + " not found: " + path.string());
}

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::uint32_t parse_index(const std::string& s, std::size_t bound, const fs::path& file) {
  std::uint32_t v = 0;
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size() || v >= bound) {
    throw FormatError(file.string() + ": id '" + s + "' is not an index below " + std::to_string(bound));
  }
  return v;
}

// Shortest text that parses back to the same double.
std::string shortest(double v) {
  char buf[32];
  const auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, end);
}

}  // namespace

// ---------------------------------------------------------------- data files

DatasetDirInfo write_generated(const GenerateOptions& opts, const fs::path& dir) {
  const SynthDataset d = generate(opts.spec);
  const double frac = opts.test_fraction > 0.0 ? opts.test_fraction : 0.5 * d.sparsity;
  const std::uint64_t test_seed = mix_keys(opts.spec.seed, kTestSplitSalt);
  const TrainTestSplit split = split_test(d, frac, test_seed);

  fs::create_directories(dir);
  write_triples(dir / "train.csv", split.train.observed(), "label");
  write_triples(dir / "test.csv", split.test, "label");
  std::vector<Interaction> feats;
  feats.reserve(d.num_pairs());
  for (std::uint64_t p = 0; p < d.num_pairs(); ++p) {
    feats.push_back({static_cast<std::uint32_t>(p / d.items), static_cast<std::uint32_t>(p % d.items),
                     d.x[p]});
  }
  write_triples(dir / "features.csv", feats, "x");

  const SynthSpec& s = opts.spec;
  Json meta;
  meta["format"] = "exoc-dataset";
  meta["format_version"] = 1;
  meta["users"] = d.users;
  meta["items"] = d.items;
  meta["label_mode"] = label_kind_name(d.label_mode);
  meta["rho"] = d.rho;
  meta["beta"] = d.beta;
  meta["sparsity"] = d.sparsity;
  meta["seed"] = s.seed;
  meta["target_sparsity"] = s.target_sparsity ? Json(*s.target_sparsity) : Json(nullptr);
  meta["beta_given"] = s.beta ? Json(*s.beta) : Json(nullptr);
  meta["feature_source"] = s.feature_source == FeatureSource::random_mf ? "random_mf" : "external_ratings";
  meta["feature_dim"] = s.feature_dim;
  if (s.feature_source == FeatureSource::external_ratings) {
    meta["ratings_path"] = s.ratings_path.string();
    meta["ratings_crc32"] = file_digest(s.ratings_path);
    meta["mf_dim"] = s.mf_dim;
    meta["mf_epochs"] = s.mf_epochs;
  }
  meta["preference_scale"] = s.preference_scale;
  meta["selection_scale"] = s.selection_scale;
  meta["test_fraction"] = frac;
  meta["test_seed"] = test_seed;
  meta["n_train"] = split.train.observed().size();
  meta["n_test"] = split.test.size();
  write_text(dir / "meta.json", meta.dump(2) + "\n");

  return {d.users, d.items, d.label_mode, d.rho, d.beta, d.sparsity, s.seed, frac};
}

std::vector<fs::path> DataSource::input_files() const {
  if (is_dir()) return {dir / "meta.json", dir / "train.csv", dir / "test.csv", dir / "features.csv"};
  return {train_file, test_file};
}

LoadedSource load_source(const DataSource& src) {
  if (!src.is_dir()) {
    if (src.train_file.empty() || src.test_file.empty()) {
      throw ValidationError("give either --data <dir> or both --train-file and --test-file");
    }
    require_file(src.train_file, "training file");
    require_file(src.test_file, "test file");
    LoadedData d = load_dataset(src.train_file, src.test_file, BinarizeRule::parse(src.binarize));
    return {std::move(d.train), std::move(d.test), std::move(d.warnings)};
  }
  if (!fs::is_directory(src.dir)) throw ValidationError("dataset directory not found: " + src.dir.string());
  for (const auto& f : src.input_files()) require_file(f, "dataset file");

  Json meta;
  try {
    meta = Json::parse(read_text(src.dir / "meta.json"));
  } catch (const Json::exception& e) {
    throw FormatError("meta.json: " + std::string(e.what()));
  }
  const auto users = meta.at("users").get<std::size_t>();
  const auto items = meta.at("items").get<std::size_t>();
  const LabelKind kind = parse_label_kind(meta.at("label_mode").get<std::string>());

  LoadedSource out{InteractionDataset(users, items, kind), {}, {}};
  const fs::path train_path = src.dir / "train.csv";
  for (const auto& t : read_triples(train_path)) {
    out.train.set_observed(parse_index(t.user, users, train_path), parse_index(t.item, items, train_path),
                           t.value);
  }
  const fs::path test_path = src.dir / "test.csv";
  for (const auto& t : read_triples(test_path)) {
    out.test.push_back({parse_index(t.user, users, test_path), parse_index(t.item, items, test_path), t.value});
  }
  const fs::path feat_path = src.dir / "features.csv";
  std::vector<double> x(users * items, std::numeric_limits<double>::quiet_NaN());
  for (const auto& t : read_triples(feat_path)) {
    x[static_cast<std::uint64_t>(parse_index(t.user, users, feat_path)) * items +
      parse_index(t.item, items, feat_path)] = t.value;
  }
  if (std::any_of(x.begin(), x.end(), [](double v) { return std::isnan(v); })) {
    throw FormatError(feat_path.string() + ": features must cover every user-item pair");
  }
  out.train.set_features(std::move(x));
  return out;
}

std::map<std::string, std::string> read_flat_config(const fs::path& path) {
  require_file(path, "config file");
  std::ifstream in(path);
  std::map<std::string, std::string> out;
  std::string line;
  std::size_t no = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return std::string();
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
  };
  while (std::getline(in, line)) {
    ++no;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ValidationError(path.string() + ":" + std::to_string(no) + ": expected key=value");
    }
    out[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return out;
}

std::string file_digest(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot read " + path.string());
  uLong crc = crc32(0L, Z_NULL, 0);
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    const auto got = in.gcount();
    if (got > 0) crc = crc32(crc, reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(got));
  }
  char hex[9];
  std::snprintf(hex, sizeof(hex), "%08lx", static_cast<unsigned long>(crc));
  return hex;
}

// ------------------------------------------------------------------ training

RunOutcome train_and_evaluate(const LoadedSource& data, const TrainOptions& opts) {
  RunOutcome out{train(data.train, opts.cfg), {}};
  out.report = evaluate(out.result.models, opts.cfg.method, data.train, data.test, opts.k);
  return out;
}

std::string summary_text(const TrainOptions& opts, const RunOutcome& out) {
  const TrainConfig& c = opts.cfg;
  const TrainTrace& t = out.result.trace;
  std::ostringstream os;
  os << "method=" << method_name(c.method) << '\n';
  os << "mode=" << label_kind_name(c.mode) << '\n';
  os << "backbone=" << backbone_name(c.backbone) << '\n';
  if (is_likelihood_method(c.method)) {
    os << "alpha=" << format_double(c.alpha) << '\n';
    if (c.mode == LabelKind::binary) os << "mc_samples=" << c.mc.samples << '\n';
  }
  os << "seed=" << c.seed << '\n';
  os << "epochs_run=" << t.epochs.size() << '\n';
  os << "best_epoch=" << t.best_epoch << '\n';
  os << "val_metric=" << t.val_metric_name << '\n';
  os << "best_val=" << format_double(t.best_val) << '\n';
  if (is_likelihood_method(c.method)) os << "rho_hat=" << format_double(out.result.models.corr.value()) << '\n';
  return os.str();
}

namespace {

// ------------------------------------------------------------ flag bundles

struct GenFlags {
  std::size_t users = 500;
  std::size_t items = 500;
  double rho = 0.0;
  std::optional<double> sparsity;
  std::optional<double> beta;
  std::string mode = "continuous";
  std::size_t feature_dim = 4;
  std::string ratings;
  std::size_t mf_dim = 8;
  std::size_t mf_epochs = 50;
  double preference_scale = 5.0;
  double selection_scale = 5.0;
  double test_fraction = 0.0;

  void add(CLI::App* sub) {
    sub->add_option("--users", users, "number of users")->capture_default_str();
    sub->add_option("--items", items, "number of items")->capture_default_str();
    sub->add_option("--rho", rho, "correlation of the latent noises")->capture_default_str();
    sub->add_option("--sparsity", sparsity, "target observed rate (default 0.05)");
    sub->add_option("--beta", beta, "fixed selection threshold instead of --sparsity");
    sub->add_option("--feature-dim", feature_dim, "rank of the random feature factors")->capture_default_str();
    sub->add_option("--ratings", ratings, "fit features by MF on an external ratings file");
    sub->add_option("--mf-dim", mf_dim, "MF rank for --ratings")->capture_default_str();
    sub->add_option("--mf-epochs", mf_epochs, "MF epochs for --ratings")->capture_default_str();
    sub->add_option("--preference-scale", preference_scale, "multiplier of x in the preference")
        ->capture_default_str();
    sub->add_option("--selection-scale", selection_scale, "multiplier of tanh in the selection score")
        ->capture_default_str();
    sub->add_option("--test-fraction", test_fraction,
                    "fraction of all pairs in the unbiased test set (0: half the sparsity)")
        ->capture_default_str();
  }

  SynthSpec spec(std::uint64_t seed) const {
    SynthSpec s;
    s.users = users;
    s.items = items;
    s.rho = rho;
    s.beta = beta;
    if (sparsity || !beta) s.target_sparsity = sparsity.value_or(0.05);
    s.feature_dim = feature_dim;
    if (!ratings.empty()) {
      require_file(ratings, "ratings file");
      s.feature_source = FeatureSource::external_ratings;
      s.ratings_path = ratings;
      s.mf_dim = mf_dim;
      s.mf_epochs = mf_epochs;
    }
    s.label_mode = parse_label_kind(mode);
    s.seed = seed;
    s.preference_scale = preference_scale;
    s.selection_scale = selection_scale;
    s.validate();
    if (!(test_fraction >= 0.0 && test_fraction < 1.0)) {
      throw ValidationError("test fraction must lie in [0, 1)");
    }
    return s;
  }
};

struct TrainFlags {
  std::string method = "ours-naive";
  double alpha = 0.8;
  std::size_t mc_samples = 64;
  double lr = 0.01;
  std::size_t embed_dim = 8;
  std::size_t batch = 256;
  std::size_t epochs = 200;
  std::size_t patience = 5;
  std::string backbone = "mf";
  std::string mode = "auto";
  double val_fraction = 0.1;
  double weight_decay = 1e-5;
  std::size_t k = 5;

  void add(CLI::App* sub, bool with_mode) {
    sub->add_option("--method", method, "naive|eib|ips|dr|ours-naive|ours-dr|ours-mle")->capture_default_str();
    sub->add_option("--alpha", alpha, "likelihood weight in [0, 1]")->capture_default_str();
    sub->add_option("--mc-samples", mc_samples, "Monte Carlo samples per pair")->capture_default_str();
    sub->add_option("--lr", lr, "learning rate of every parameter group")->capture_default_str();
    sub->add_option("--embed-dim", embed_dim, "MF embedding dimension")->capture_default_str();
    sub->add_option("--batch", batch, "batch size of both phases")->capture_default_str();
    sub->add_option("--epochs", epochs, "maximum epochs")->capture_default_str();
    sub->add_option("--patience", patience, "early-stopping patience")->capture_default_str();
    sub->add_option("--backbone", backbone, "mf|feature")->capture_default_str();
    if (with_mode) sub->add_option("--mode", mode, "auto|binary|continuous")->capture_default_str();
    sub->add_option("--val-fraction", val_fraction, "held-out validation fraction")->capture_default_str();
    sub->add_option("--weight-decay", weight_decay, "L2 added to gradients")->capture_default_str();
    sub->add_option("--k", k, "cutoff of Recall@K and NDCG@K")->capture_default_str();
  }

  TrainConfig config(LabelKind data_kind, std::uint64_t seed) const {
    TrainConfig c;
    c.method = parse_method(method);
    c.alpha = alpha;
    c.mc.samples = mc_samples;
    c.mc.seed = seed;
    c.set_lr(lr);
    c.embed_dim = embed_dim;
    c.batch_r = c.batch_d = batch;
    c.max_epochs = epochs;
    c.patience = patience;
    c.backbone = parse_backbone(backbone);
    c.mode = mode == "auto" ? data_kind : parse_label_kind(mode);
    if (c.mode != data_kind) {
      throw ValidationError(std::string("--mode ") + label_kind_name(c.mode) + " conflicts with " +
                            label_kind_name(data_kind) + " dataset labels");
    }
    c.val_fraction = val_fraction;
    c.weight_decay = weight_decay;
    c.seed = seed;
    if (k == 0) throw ValidationError("--k must be positive");
    c.validate();
    return c;
  }

  void to_config_text(std::ostringstream& os) const {
    os << "method=" << method << '\n'
       << "alpha=" << shortest(alpha) << '\n'
       << "mc-samples=" << mc_samples << '\n'
       << "lr=" << shortest(lr) << '\n'
       << "embed-dim=" << embed_dim << '\n'
       << "batch=" << batch << '\n'
       << "epochs=" << epochs << '\n'
       << "patience=" << patience << '\n'
       << "backbone=" << backbone << '\n'
       << "val-fraction=" << shortest(val_fraction) << '\n'
       << "weight-decay=" << shortest(weight_decay) << '\n'
       << "k=" << k << '\n';
  }
};

struct SourceFlags {
  std::string data;
  std::string train_file;
  std::string test_file;
  std::string binarize = "none";

  void add(CLI::App* sub) {
    sub->add_option("--data", data, "generated dataset directory");
    sub->add_option("--train-file", train_file, "MNAR training triples user,item,rating");
    sub->add_option("--test-file", test_file, "unbiased test triples user,item,rating");
    sub->add_option("--binarize", binarize, "none | ge:<t> | lt:<t>")->capture_default_str();
  }

  DataSource source() const {
    if (!data.empty() && (!train_file.empty() || !test_file.empty())) {
      throw ValidationError("--data conflicts with --train-file/--test-file");
    }
    return {data, train_file, test_file, binarize};
  }

  void to_config_text(std::ostringstream& os) const {
    if (!data.empty()) os << "data=" << data << '\n';
    if (!train_file.empty()) os << "train-file=" << train_file << '\n';
    if (!test_file.empty()) os << "test-file=" << test_file << '\n';
    if (binarize != "none") os << "binarize=" << binarize << '\n';
  }
};

Json inputs_json(const DataSource& src) {
  Json arr = Json::array();
  for (const auto& f : src.input_files()) arr.push_back({{"path", f.string()}, {"crc32", file_digest(f)}});
  return arr;
}

Json config_json(const std::string& text) {
  Json obj = Json::object();
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) obj[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return obj;
}

Json argv_json(int argc, const char* const* argv) {
  Json a = Json::array();
  for (int i = 0; i < argc; ++i) a.push_back(argv[i]);
  return a;
}

std::optional<std::uint64_t> data_seed_of(const DataSource& src) {
  if (!src.is_dir()) return std::nullopt;
  const Json meta = Json::parse(read_text(src.dir / "meta.json"));
  return meta.at("seed").get<std::uint64_t>();
}

void write_run_outputs(const fs::path& dir, const TrainOptions& opts, const RunOutcome& out) {
  save_checkpoint(out.result.models.model_o, out.result.models.model_r, out.result.models.corr,
                  dir / "best.ckpt");
  out.result.trace.write_csv(dir / "trace.csv");
  if (!out.result.trace.rho_profile.empty()) {
    std::ostringstream os;
    os << "rho,val_nll\n";
    for (const auto& p : out.result.trace.rho_profile) {
      os << format_double(p.rho) << ',' << format_double(p.val_nll) << '\n';
    }
    write_text(dir / "rho_profile.csv", os.str());
  }
  write_text(dir / "metrics.txt", out.report.to_key_value());
  write_text(dir / "metrics.csv", EvalReport::csv_header() + "\n" + out.report.to_csv_row() + "\n");
  write_text(dir / "summary.txt", summary_text(opts, out));
}

// ------------------------------------------------------------------ commands

int cmd_generate(const GenFlags& g, std::uint64_t seed, const std::string& out) {
  if (out.empty()) throw ValidationError("--out is required");
  GenerateOptions opts{g.spec(seed), g.test_fraction};
  const DatasetDirInfo info = write_generated(opts, out);
  std::cout << "users=" << info.users << "\nitems=" << info.items << "\nrho=" << shortest(info.rho)
            << "\nbeta=" << shortest(info.beta) << "\nsparsity=" << shortest(info.sparsity)
            << "\ntest_fraction=" << shortest(info.test_fraction) << '\n';
  return kExitOk;
}

int cmd_train(const SourceFlags& s, const TrainFlags& t, std::uint64_t seed, std::string out, int argc,
              const char* const* argv) {
  const DataSource src = s.source();
  LoadedSource data = load_source(src);
  for (const auto& w : data.warnings) std::cerr << "warning: " << w << '\n';
  TrainOptions opts{src, t.config(data.train.label_kind(), seed), t.k};

  if (out.empty()) {
    const fs::path base = src.is_dir() ? src.dir / "runs" : fs::path("runs");
    out = (base / (std::string(method_name(opts.cfg.method)) + "-seed" + std::to_string(seed))).string();
  }
  const fs::path dir(out);
  fs::create_directories(dir);

  std::ostringstream cfg_text;
  s.to_config_text(cfg_text);
  t.to_config_text(cfg_text);
  cfg_text << "mode=" << label_kind_name(opts.cfg.mode) << '\n' << "seed=" << seed << '\n';
  write_text(dir / "config.txt", cfg_text.str());

  Json manifest;
  manifest["tool"] = "exoc";
  manifest["version"] = version();
  manifest["command"] = "train";
  manifest["argv"] = argv_json(argc, argv);
  manifest["config"] = config_json(cfg_text.str());
  manifest["seeds"] = {{"train", seed}, {"mc", opts.cfg.mc.seed}};
  if (auto ds = data_seed_of(src)) manifest["seeds"]["data"] = *ds;
  manifest["isa"] = std::string(kernels::isa_name(kernels::active_isa()));
  manifest["inputs"] = inputs_json(src);
  manifest["started_at"] = utc_now();
  manifest["finished_at"] = nullptr;
  manifest["status"] = "running";
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");

  try {
    const RunOutcome res = train_and_evaluate(data, opts);
    write_run_outputs(dir, opts, res);
    manifest["finished_at"] = utc_now();
    manifest["status"] = "ok";
    write_text(dir / "manifest.json", manifest.dump(2) + "\n");
    std::cout << "run_dir=" << dir.string() << '\n' << summary_text(opts, res) << res.report.to_key_value();
  } catch (const std::exception& e) {
    manifest["finished_at"] = utc_now();
    manifest["status"] = "failed";
    manifest["error"] = e.what();
    write_text(dir / "manifest.json", manifest.dump(2) + "\n");
    throw;
  }
  return kExitOk;
}

struct EvalFlags {
  std::string run;
  std::string ckpt;
  std::string method;
  std::string out;
  std::size_t k = 5;
};

int cmd_eval(SourceFlags s, EvalFlags e) {
  fs::path ckpt;
  if (!e.run.empty()) {
    const fs::path run(e.run);
    const auto cfg = read_flat_config(run / "config.txt");
    auto take = [&](const char* key, std::string& dst) {
      if (dst.empty() && cfg.count(key)) dst = cfg.at(key);
    };
    if (s.data.empty() && s.train_file.empty()) {
      take("data", s.data);
      take("train-file", s.train_file);
      take("test-file", s.test_file);
      if (cfg.count("binarize")) s.binarize = cfg.at("binarize");
    }
    take("method", e.method);
    ckpt = e.ckpt.empty() ? run / "best.ckpt" : fs::path(e.ckpt);
    if (e.out.empty()) e.out = run.string();
  } else {
    if (e.ckpt.empty()) throw ValidationError("give --run <dir> or --ckpt <file>");
    ckpt = e.ckpt;
    if (e.out.empty()) e.out = ckpt.parent_path().empty() ? "." : ckpt.parent_path().string();
  }
  if (e.method.empty()) throw ValidationError("--method is required with --ckpt");
  if (e.k == 0) throw ValidationError("--k must be positive");
  const Method method = parse_method(e.method);
  require_file(ckpt, "checkpoint");

  const LoadedSource data = load_source(s.source());
  Checkpoint c = load_checkpoint(ckpt);
  const Models models{std::move(c.model_o), std::move(c.model_r), c.corr, std::nullopt};
  const EvalReport rep = evaluate(models, method, data.train, data.test, e.k);

  const fs::path dir(e.out);
  fs::create_directories(dir);
  const std::string stem = "eval_k" + std::to_string(e.k);
  write_text(dir / (stem + ".txt"), rep.to_key_value());
  write_text(dir / (stem + ".csv"), EvalReport::csv_header() + "\n" + rep.to_csv_row() + "\n");
  std::cout << rep.to_key_value();
  return kExitOk;
}

// -------------------------------------------------------------------- sweep

struct SweepFlags {
  std::string axis;
  std::vector<double> values;
  std::size_t repeats = 1;
  std::size_t jobs = 1;
};

struct SweepRow {
  double value = 0.0;
  std::size_t repeat = 0;
  std::uint64_t data_seed = 0;
  std::uint64_t train_seed = 0;
  bool ok = false;
  std::string error;
  std::size_t epochs = 0;
  std::size_t best_epoch = 0;
  double best_val = 0.0;
  double rho_hat = std::numeric_limits<double>::quiet_NaN();
  EvalReport report;
  double seconds = 0.0;
};

std::string csv_safe(std::string s) {
  std::replace_if(s.begin(), s.end(), [](char c) { return c == ',' || c == '\n' || c == '\r'; }, ';');
  return s;
}

std::string value_label(double v) { return shortest(v); }

std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {std::nan(""), std::nan("")};
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  if (v.size() < 2) return {m, std::nan("")};
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return {m, std::sqrt(ss / static_cast<double>(v.size() - 1))};
}

int cmd_sweep(const SweepFlags& sw, const GenFlags& g, const TrainFlags& t, std::uint64_t seed,
              const std::string& out, int argc, const char* const* argv) {
  if (sw.axis != "rho" && sw.axis != "alpha" && sw.axis != "mc_L") {
    throw ValidationError("--axis must be rho, alpha or mc_L");
  }
  if (sw.values.empty()) throw ValidationError("--values must be non-empty");
  if (sw.repeats == 0) throw ValidationError("--repeats must be at least 1");
  if (sw.jobs == 0) throw ValidationError("--jobs must be at least 1");
  if (out.empty()) throw ValidationError("--out is required");
  for (double v : sw.values) {
    if (sw.axis == "mc_L" && !(v >= 1.0 && v == std::floor(v))) {
      throw ValidationError("mc_L values must be positive integers");
    }
    if (sw.axis == "alpha" && !(v >= 0.0 && v <= 1.0)) throw ValidationError("alpha values must lie in [0, 1]");
    if (sw.axis == "rho" && !(std::fabs(v) < 1.0)) throw ValidationError("rho values must satisfy |rho| < 1");
  }
  // Validate the base settings once so usage errors fail fast.
  const SynthSpec base_spec = g.spec(seed);
  (void)t.config(base_spec.label_mode, seed);

  const fs::path root(out);
  fs::create_directories(root);
  {
    Json m;
    m["tool"] = "exoc";
    m["version"] = version();
    m["command"] = "sweep";
    m["argv"] = argv_json(argc, argv);
    m["axis"] = sw.axis;
    m["values"] = sw.values;
    m["repeats"] = sw.repeats;
    m["base_seed"] = seed;
    m["isa"] = std::string(kernels::isa_name(kernels::active_isa()));
    m["started_at"] = utc_now();
    write_text(root / "manifest.json", m.dump(2) + "\n");
  }

  const bool shared_data = sw.axis != "rho";
  std::vector<SweepRow> rows(sw.values.size() * sw.repeats);
  for (std::size_t vi = 0; vi < sw.values.size(); ++vi) {
    for (std::size_t r = 0; r < sw.repeats; ++r) {
      SweepRow& row = rows[vi * sw.repeats + r];
      row.value = sw.values[vi];
      row.repeat = r;
      // Alpha and mc_L runs replay the same data and training seed across
      // values; rho runs need fresh data per value.
      row.data_seed = shared_data ? seed + r : seed + 1000 * (vi + 1) + r;
      row.train_seed = shared_data ? seed + r : seed + 1000 * (vi + 1) + r;
    }
  }

  std::atomic<std::size_t> next{0};
  std::mutex log_mu;
  auto worker = [&] {
    for (std::size_t i = next++; i < rows.size(); i = next++) {
      SweepRow& row = rows[i];
      const auto t0 = std::chrono::steady_clock::now();
      try {
        GenFlags gv = g;
        TrainFlags tv = t;
        if (sw.axis == "rho") gv.rho = row.value;
        if (sw.axis == "alpha") tv.alpha = row.value;
        if (sw.axis == "mc_L") tv.mc_samples = static_cast<std::size_t>(row.value);
        const SynthSpec spec = gv.spec(row.data_seed);
        const SynthDataset d = generate(spec);
        const double frac = g.test_fraction > 0.0 ? g.test_fraction : 0.5 * d.sparsity;
        TrainTestSplit split = split_test(d, frac, mix_keys(row.data_seed, kTestSplitSalt));
        const LoadedSource data{std::move(split.train), std::move(split.test), {}};
        const TrainOptions opts{{}, tv.config(spec.label_mode, row.train_seed), tv.k};
        const RunOutcome res = train_and_evaluate(data, opts);
        const fs::path dir = root / "runs" / (sw.axis + "=" + value_label(row.value)) / ("r" + std::to_string(row.repeat));
        fs::create_directories(dir);
        write_run_outputs(dir, opts, res);
        row.ok = true;
        row.epochs = res.result.trace.epochs.size();
        row.best_epoch = res.result.trace.best_epoch;
        row.best_val = res.result.trace.best_val;
        if (is_likelihood_method(opts.cfg.method)) row.rho_hat = res.result.models.corr.value();
        row.report = res.report;
      } catch (const std::exception& e) {
        row.ok = false;
        row.error = e.what();
      }
      row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::lock_guard<std::mutex> lock(log_mu);
      std::cerr << sw.axis << "=" << value_label(row.value) << " repeat " << row.repeat << ": "
                << (row.ok ? "ok" : "failed: " + row.error) << '\n';
    }
  };
  std::vector<std::thread> pool;
  const std::size_t n_threads = std::min(sw.jobs, rows.size());
  for (std::size_t j = 1; j < n_threads; ++j) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();

  std::ostringstream runs;
  runs << "axis,value,repeat,data_seed,train_seed,status,epochs,best_epoch,best_val,rho_hat,"
       << EvalReport::csv_header() << ",seconds,error\n";
  for (const auto& r : rows) {
    runs << sw.axis << ',' << value_label(r.value) << ',' << r.repeat << ',' << r.data_seed << ','
         << r.train_seed << ',' << (r.ok ? "ok" : "failed") << ',';
    if (r.ok) {
      runs << r.epochs << ',' << r.best_epoch << ',' << format_double(r.best_val) << ','
           << (std::isnan(r.rho_hat) ? std::string() : format_double(r.rho_hat)) << ','
           << r.report.to_csv_row();
    } else {
      runs << ",,,,,,,,,";
    }
    runs << ',' << format_double(r.seconds) << ',' << csv_safe(r.error) << '\n';
  }
  write_text(root / "sweep_runs.csv", runs.str());

  std::ostringstream agg;
  agg << "axis,value,n_ok,n_failed";
  const char* names[] = {"mse", "auc", "recall_at_k", "ndcg_at_k", "rho_hat", "best_val", "seconds"};
  for (const char* n : names) agg << ',' << n << "_mean," << n << "_std";
  agg << '\n';
  std::size_t failed_total = 0;
  for (std::size_t vi = 0; vi < sw.values.size(); ++vi) {
    std::vector<double> cols[7];
    std::size_t failed = 0;
    for (std::size_t r = 0; r < sw.repeats; ++r) {
      const SweepRow& row = rows[vi * sw.repeats + r];
      if (!row.ok) {
        ++failed;
        continue;
      }
      cols[0].push_back(row.report.mse);
      if (row.report.has_auc) cols[1].push_back(row.report.auc);
      cols[2].push_back(row.report.recall_at_k);
      cols[3].push_back(row.report.ndcg_at_k);
      if (!std::isnan(row.rho_hat)) cols[4].push_back(row.rho_hat);
      cols[5].push_back(row.best_val);
      cols[6].push_back(row.seconds);
    }
    failed_total += failed;
    agg << sw.axis << ',' << value_label(sw.values[vi]) << ',' << (sw.repeats - failed) << ',' << failed;
    for (const auto& c : cols) {
      const auto [m, s] = mean_std(c);
      agg << ',' << format_double(m) << ',' << format_double(s);
    }
    agg << '\n';
  }
  write_text(root / "sweep_summary.csv", agg.str());
  std::cout << "runs=" << rows.size() << "\nfailed=" << failed_total << "\nout=" << root.string() << '\n';
  return kExitOk;
}

// Appends "--key value" for config entries whose flag is absent from argv,
// so command-line flags win.
std::vector<std::string> merge_config(const std::vector<std::string>& args) {
  std::string path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
  }
  if (path.empty()) return args;
  std::vector<std::string> out = args;
  for (const auto& [key, value] : read_flat_config(path)) {
    const std::string flag = "--" + key;
    const bool given = std::any_of(args.begin(), args.end(), [&](const std::string& a) {
      return a == flag || a.rfind(flag + "=", 0) == 0;
    });
    if (!given) out.push_back(flag + "=" + value);
  }
  return out;
}

}  // namespace

int run(int argc, const char* const* argv) {
  CLI::App app{"Likelihood-based debiasing of recommender feedback under correlated latent noise", "exoc"};
  app.set_version_flag("--version", version());
  app.require_subcommand(1);

  std::uint64_t seed = 1;
  std::string out;
  std::string config;
  auto shared = [&](CLI::App* sub) {
    sub->add_option("--seed", seed, "random seed")->capture_default_str();
    sub->add_option("--out", out, "output directory");
    sub->add_option("--config", config, "flat key=value file with the same keys as the flags");
  };

  GenFlags gen;
  auto* g = app.add_subcommand("generate", "generate a semi-synthetic dataset directory");
  shared(g);
  gen.add(g);
  g->add_option("--mode", gen.mode, "continuous|binary labels")->capture_default_str();

  SourceFlags src;
  TrainFlags trn;
  auto* t = app.add_subcommand("train", "train a method and evaluate it on the unbiased test set");
  shared(t);
  src.add(t);
  trn.add(t, true);

  SourceFlags esrc;
  EvalFlags ev;
  auto* e = app.add_subcommand("eval", "evaluate a checkpoint");
  shared(e);
  esrc.add(e);
  e->add_option("--run", ev.run, "run directory written by train");
  e->add_option("--ckpt", ev.ckpt, "checkpoint file");
  e->add_option("--method", ev.method, "method that produced the checkpoint");
  e->add_option("--k", ev.k, "cutoff of Recall@K and NDCG@K")->capture_default_str();

  SweepFlags sw;
  GenFlags sgen;
  TrainFlags strn;
  auto* s = app.add_subcommand("sweep", "grid of generate/train/evaluate runs over one axis");
  shared(s);
  sgen.add(s);
  s->add_option("--mode", sgen.mode, "continuous|binary labels")->capture_default_str();
  strn.add(s, false);
  s->add_option("--axis", sw.axis, "rho|alpha|mc_L")->required();
  s->add_option("--values", sw.values, "comma-separated axis values")->delimiter(',')->required();
  s->add_option("--repeats", sw.repeats, "runs per value")->capture_default_str();
  s->add_option("--jobs", sw.jobs, "concurrent runs")->capture_default_str();

  try {
    std::vector<std::string> args(argv + 1, argv + argc);
    args = merge_config(args);
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kExitOk : kExitUsage;
  } catch (const ValidationError& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kExitUsage;
  }

  try {
    if (*g) return cmd_generate(gen, seed, out);
    if (*t) return cmd_train(src, trn, seed, out, argc, argv);
    if (*e) return cmd_eval(esrc, ev);
    if (*s) return cmd_sweep(sw, sgen, strn, seed, out, argc, argv);
  } catch (const ValidationError& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kExitUsage;
  } catch (const ShapeError& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace exoc::app
