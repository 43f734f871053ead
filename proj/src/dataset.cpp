#include "exoc/dataset.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "exoc/error.hpp"

namespace exoc {

const char* label_kind_name(LabelKind kind) {
  return kind == LabelKind::binary ? "binary" : "continuous";
}

LabelKind parse_label_kind(const std::string& s) {
  if (s == "binary") return LabelKind::binary;
  if (s == "continuous") return LabelKind::continuous;
  throw ValidationError("unknown label mode '" + s + "' (expected continuous|binary)");
}

ScoreInput input_for(const ScoreModel& model, const PairSample& s) {
  if (model.input_kind() == InputKind::pair) return s.pair;
  return ScalarFeature{s.x};
}

InteractionDataset::InteractionDataset(std::size_t users, std::size_t items, LabelKind kind)
    : users_(users), items_(items), kind_(kind) {}

bool InteractionDataset::set_observed(std::uint32_t user, std::uint32_t item, double label) {
  if (user >= users_ || item >= items_) throw ValidationError("observed pair out of range");
  const std::uint64_t key = flat({user, item});
  if (auto it = index_.find(key); it != index_.end()) {
    observed_[it->second].label = label;
    return false;
  }
  index_.emplace(key, observed_.size());
  observed_.push_back({user, item, label});
  return true;
}

std::optional<std::size_t> InteractionDataset::observed_index(std::uint64_t key) const {
  if (auto it = index_.find(key); it != index_.end()) return it->second;
  return std::nullopt;
}

double InteractionDataset::sparsity() const {
  return num_pairs() == 0 ? 0.0 : static_cast<double>(observed_.size()) / num_pairs();
}

PairRef InteractionDataset::pair_at(std::uint64_t key) const {
  return {static_cast<std::uint32_t>(key / items_), static_cast<std::uint32_t>(key % items_)};
}

void InteractionDataset::set_features(std::vector<double> x) {
  if (x.size() != num_pairs()) throw ShapeError("feature vector must cover every pair");
  features_ = std::move(x);
}

PairSample InteractionDataset::sample(std::uint64_t key) const {
  PairSample s;
  s.pair = pair_at(key);
  s.x = feature(key);
  s.key = key;
  if (auto idx = observed_index(key)) {
    s.observed = true;
    s.label = observed_[*idx].label;
  }
  return s;
}

PairSample InteractionDataset::observed_sample(std::size_t i) const {
  const Interaction& it = observed_[i];
  PairSample s;
  s.pair = {it.user, it.item};
  s.key = flat(s.pair);
  s.x = feature(s.key);
  s.observed = true;
  s.label = it.label;
  return s;
}

PairSample InteractionDataset::labelled_sample(const Interaction& it) const {
  PairSample s;
  s.pair = {it.user, it.item};
  s.key = flat(s.pair);
  s.x = feature(s.key);
  s.label = it.label;
  return s;
}

BinarizeRule BinarizeRule::parse(const std::string& spec) {
  if (spec.empty() || spec == "none") return {};
  const auto colon = spec.find(':');
  if (colon == std::string::npos) {
    throw ValidationError("binarize rule must be 'ge:<t>', 'lt:<t>' or 'none'");
  }
  const std::string kind = spec.substr(0, colon);
  double t = 0.0;
  try {
    std::size_t used = 0;
    t = std::stod(spec.substr(colon + 1), &used);
    if (used != spec.size() - colon - 1) throw std::invalid_argument("trailing");
  } catch (const std::exception&) {
    throw ValidationError("binarize threshold is not a number: " + spec);
  }
  if (!std::isfinite(t)) throw ValidationError("binarize threshold must be finite");
  if (kind == "ge") return {Kind::rating_ge_threshold, t};
  if (kind == "lt") return {Kind::ratio_lt_threshold, t};
  throw ValidationError("unknown binarize rule kind '" + kind + "'");
}

std::string BinarizeRule::to_string() const {
  std::ostringstream os;
  switch (kind) {
    case Kind::none:
      return "none";
    case Kind::rating_ge_threshold:
      os << "ge:" << threshold;
      break;
    case Kind::ratio_lt_threshold:
      os << "lt:" << threshold;
      break;
  }
  return os.str();
}

double BinarizeRule::apply(double raw) const {
  switch (kind) {
    case Kind::none:
      return raw;
    case Kind::rating_ge_threshold:
      return raw >= threshold ? 1.0 : 0.0;
    case Kind::ratio_lt_threshold:
      return raw < threshold ? 1.0 : 0.0;
  }
  return raw;
}

namespace {

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

bool parse_double(const std::string& s, double& out) {
  const char* first = s.data();
  const char* last = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(first, last, out);
  return ec == std::errc() && ptr == last && std::isfinite(out);
}

}  // namespace

std::vector<RawTriple> read_triples(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open ratings file: " + path.string());
  std::vector<RawTriple> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty()) continue;
    const char sep = line.find('\t') != std::string::npos ? '\t' : ',';
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
      const auto pos = line.find(sep, start);
      fields.push_back(trim(line.substr(start, pos - start)));
      if (pos == std::string::npos) break;
      start = pos + 1;
    }
    if (fields.size() != 3) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) +
                        ": expected 3 fields, found " + std::to_string(fields.size()));
    }
    double value = 0.0;
    if (!parse_double(fields[2], value)) {
      if (rows.empty() && lineno == 1) continue;  // header
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": bad rating '" +
                        fields[2] + "'");
    }
    if (fields[0].empty() || fields[1].empty()) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": empty id");
    }
    rows.push_back({fields[0], fields[1], value});
  }
  if (rows.empty()) throw FormatError("ratings file has no data rows: " + path.string());
  return rows;
}

std::uint32_t IdMap::intern_user(const std::string& id) {
  auto [it, fresh] = user_index.emplace(id, static_cast<std::uint32_t>(users.size()));
  if (fresh) users.push_back(id);
  return it->second;
}

std::uint32_t IdMap::intern_item(const std::string& id) {
  auto [it, fresh] = item_index.emplace(id, static_cast<std::uint32_t>(items.size()));
  if (fresh) items.push_back(id);
  return it->second;
}

void IdMap::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write id map: " + path.string());
  out << "kind,raw_id,index\n";
  for (std::size_t i = 0; i < users.size(); ++i) out << "user," << users[i] << ',' << i << '\n';
  for (std::size_t i = 0; i < items.size(); ++i) out << "item," << items[i] << ',' << i << '\n';
}

LoadedData load_dataset(const std::filesystem::path& train_path,
                        const std::filesystem::path& test_path, const BinarizeRule& rule) {
  const auto train_rows = read_triples(train_path);
  const auto test_rows = read_triples(test_path);
  IdMap ids;
  for (const auto* rows : {&train_rows, &test_rows}) {
    for (const auto& r : *rows) {
      ids.intern_user(r.user);
      ids.intern_item(r.item);
    }
  }
  const LabelKind kind =
      rule.kind == BinarizeRule::Kind::none ? LabelKind::continuous : LabelKind::binary;
  LoadedData out{InteractionDataset(ids.users.size(), ids.items.size(), kind), {}, ids, {}};
  for (const auto& r : train_rows) {
    const auto u = ids.user_index.at(r.user);
    const auto i = ids.item_index.at(r.item);
    if (!out.train.set_observed(u, i, rule.apply(r.value))) {
      out.warnings.push_back("duplicate training pair (" + r.user + ", " + r.item +
                             "); keeping the last occurrence");
    }
  }
  std::unordered_map<std::uint64_t, std::size_t> seen;
  for (const auto& r : test_rows) {
    const auto u = ids.user_index.at(r.user);
    const auto i = ids.item_index.at(r.item);
    const std::uint64_t key = static_cast<std::uint64_t>(u) * ids.items.size() + i;
    const Interaction it{u, i, rule.apply(r.value)};
    if (auto f = seen.find(key); f != seen.end()) {
      out.test[f->second] = it;
      out.warnings.push_back("duplicate test pair (" + r.user + ", " + r.item +
                             "); keeping the last occurrence");
    } else {
      seen.emplace(key, out.test.size());
      out.test.push_back(it);
    }
  }
  return out;
}

void write_triples(const std::filesystem::path& path, const std::vector<Interaction>& rows,
                   const char* value_header) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << "user_id,item_id," << value_header << '\n';
  char buf[64];
  for (const auto& r : rows) {
    auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), r.label);
    out << r.user << ',' << r.item << ',';
    out.write(buf, end - buf);
    out << '\n';
  }
  if (!out) throw Error("failed writing " + path.string());
}

}  // namespace exoc
