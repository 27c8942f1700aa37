// Batch driver for the sketch hashing and zero-shot pipeline.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "sketch/config.hpp"
#include "sketch/sketch.hpp"

namespace fs = std::filesystem;
using namespace sketch;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitMissingInput = 3;
constexpr int kExitStage = 4;

using Real = float;

struct Options {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  bool dry_run = false;
  std::string out = "runs";

  // command inputs
  std::string data, split, checkpoint, se, eve, prototypes, input, format = "quickdraw", which = "gallery";
  std::vector<std::string> gallery, query;
  std::optional<int> classes, per_class;
  std::optional<std::size_t> k;
  int bins = 20;
};

/// Everything a command needs to know before it runs.
struct Plan {
  std::string command;
  std::vector<std::string> reads;
  std::vector<std::string> writes;
  std::vector<std::string> steps;
};

void require_file(const std::string& flag, const std::string& path) {
  if (path.empty()) fail(ErrorKind::ConfigError, "--" + flag + " is required");
  if (!fs::is_regular_file(path)) fail(ErrorKind::MissingInput, "--" + flag + ": no such file '" + path + "'");
}

template <class Fn>
void write_atomic(const fs::path& path, Fn&& fn) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::StageFailure, "cannot write '" + tmp.string() + "'");
    fn(out);
    out.flush();
    if (!out) fail(ErrorKind::StageFailure, "write failed for '" + tmp.string() + "'");
  }
  fs::rename(tmp, path);
}

std::ifstream open_in(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::MissingInput, "cannot open '" + path + "'");
  return in;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Quotas for n samples in the same proportions as `q`; the remainder after
/// flooring goes to the query split.
SplitQuotas proportional_quotas(const SplitQuotas& q, int n) {
  const double total = q.total();
  if (total <= 0) fail(ErrorKind::ConfigError, "split quotas sum to zero");
  const int a = static_cast<int>(n * (q.train / total));
  const int b = static_cast<int>(n * ((q.train + q.val) / total));
  const int c = static_cast<int>(n * ((q.train + q.val + q.gallery) / total));
  return {a, b - a, c - b, n - c};
}

ad::ParameterSet<Real> read_checkpoint(const std::string& path) {
  auto in = open_in(path);
  return ad::load_checkpoint<Real>(in);
}

CodeStore read_codes(const std::string& path) {
  auto in = open_in(path);
  return load_codes(in);
}

std::vector<SketchSample> load_split(const Options& o, const RunConfig& cfg, Split which) {
  auto records = parse_stroke_file(o.data, StrokeFormat::canonical);
  auto split_in = open_in(o.split);
  auto split = read_split_csv(split_in);
  return make_samples(select_split(records, split, which), cfg.encoder.raster_size);
}

void write_log(const fs::path& path, const std::vector<TrainLogEntry>& log) {
  write_atomic(path, [&](std::ostream& out) {
    for (const auto& e : log) {
      nlohmann::ordered_json j;
      j["stage"] = e.stage;
      j["iteration"] = e.iteration;
      j["epoch"] = e.epoch;
      j["total"] = e.total;
      j["cel"] = e.cel;
      j["scl"] = e.scl;
      j["cl"] = e.cl;
      j["ql"] = e.ql;
      j["wall_time"] = e.wall_seconds;
      out << j.dump() << '\n';
    }
  });
}

void save_params(const fs::path& path, const ad::ParameterSet<Real>& params) {
  write_atomic(path, [&](std::ostream& out) { ad::save_checkpoint(out, params); });
}

/// Encoder of the zero-shot pipeline: relu fusion over the seen classes.
EncoderConfig se_config(const RunConfig& cfg) {
  EncoderConfig e = cfg.encoder;
  e.fusion_activation = ad::Activation::relu;
  e.fusion_dim = cfg.zsl.se_fusion_dim;
  const std::set<int> unseen(cfg.zsl.unseen.begin(), cfg.zsl.unseen.end());
  e.num_classes = cfg.data.classes - static_cast<int>(unseen.size());
  return e;
}

EveConfig eve_config(const RunConfig& cfg) {
  EveConfig e;
  e.semantic_dim = cfg.zsl.se_fusion_dim;
  e.visual_dim = cfg.zsl.se_fusion_dim;
  e.hidden = cfg.zsl.eve_hidden;
  e.direction = cfg.zsl.direction;
  return e;
}

std::vector<ClassPrototype> auxiliary_prototypes(const RunConfig& cfg, const ad::ParameterSet<Real>& se) {
  const EncoderConfig sc = se_config(cfg);
  auto aux = make_samples(auxiliary_renderings(cfg.data.classes, cfg.zsl.aux_per_class, cfg.zsl.aux_seed), sc.raster_size);
  auto inputs = prepare_inputs<Real>(aux);
  auto feats = extract_features<Real>(inputs, se, sc, cfg.threads);
  std::vector<LabeledFeature> lf;
  std::vector<int> expected;
  for (std::size_t i = 0; i < aux.size(); ++i) lf.push_back({aux[i].sample_id, aux[i].class_id, feats[i]});
  for (int c = 0; c < cfg.data.classes; ++c) expected.push_back(c);
  return build_prototypes(lf, expected);
}

std::vector<ClassPrototype> read_prototype_file(const std::string& path) {
  auto in = open_in(path);
  return read_prototypes(in);
}

// ---------------------------------------------------------------------------
// Commands. Each fills the plan, and runs only when `run` is set.

void cmd_synth(const Options& o, RunConfig& cfg, const fs::path& dir, Plan& p, bool run) {
  if (o.classes) cfg.data.classes = *o.classes;
  if (o.per_class && cfg.data.quotas.total() != *o.per_class) {
    cfg.data.quotas = proportional_quotas(cfg.data.quotas, *o.per_class);
    cfg.data.per_class = *o.per_class;
  }
  cfg.validate();
  p.writes = {"sketches.jsonl", "split.csv", "classes.csv"};
  p.steps = {"generate " + std::to_string(cfg.data.classes) + " classes x " + std::to_string(cfg.data.per_class) + " samples"};
  if (!run) return;
  auto set = generate_synthetic(cfg.data.classes, cfg.data.per_class, cfg.seed, cfg.data.quotas, cfg.data.jitter);
  write_atomic(dir / "sketches.jsonl", [&](std::ostream& out) { write_canonical(out, set.records); });
  write_atomic(dir / "split.csv", [&](std::ostream& out) { write_split_csv(out, set.split); });
  write_atomic(dir / "classes.csv", [&](std::ostream& out) {
    out << "class_id,word\n";
    for (std::size_t c = 0; c < set.class_names.size(); ++c) out << c << ',' << set.class_names[c] << '\n';
  });
}

void cmd_ingest(const Options& o, RunConfig& cfg, const fs::path& dir, Plan& p, bool run) {
  require_file("input", o.input);
  const auto format = o.format == "canonical"   ? StrokeFormat::canonical
                      : o.format == "quickdraw" ? StrokeFormat::quickdraw_simplified
                                                : (fail(ErrorKind::ConfigError, "--format must be quickdraw or canonical"),
                                                   StrokeFormat::canonical);
  p.reads = {o.input};
  p.writes = {"sketches.jsonl", "split.csv", "classes.csv"};
  p.steps = {"parse " + o.format + " records", "assign class ids by sorted word", "split each class in configured proportions"};
  if (!run) return;
  auto records = parse_stroke_file(o.input, format);
  std::map<std::string, int> class_of;
  if (format == StrokeFormat::quickdraw_simplified) {
    for (const auto& r : records) class_of.emplace(r.word, 0);
    int next = 0;
    for (auto& [w, id] : class_of) id = next++;
    for (std::size_t i = 0; i < records.size(); ++i) {
      records[i].class_id = class_of.at(records[i].word);
      records[i].sample_id = static_cast<std::int64_t>(i);
    }
  } else {
    for (const auto& r : records) class_of.emplace(r.word.empty() ? std::to_string(r.class_id) : r.word, r.class_id);
  }
  std::map<int, std::vector<std::int64_t>> members;
  for (const auto& r : records) members[r.class_id].push_back(r.sample_id);
  DatasetSplit split;
  split.quotas = cfg.data.quotas;
  for (const auto& [cls, ids] : members) {
    const auto q = proportional_quotas(cfg.data.quotas, static_cast<int>(ids.size()));
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const int idx = static_cast<int>(i);
      const Split s = idx < q.train                     ? Split::train
                      : idx < q.train + q.val           ? Split::val
                      : idx < q.train + q.val + q.gallery ? Split::gallery
                                                          : Split::query;
      if (!split.assignment.emplace(ids[i], s).second)
        fail(ErrorKind::MalformedRecord, "duplicate sample id " + std::to_string(ids[i]));
    }
  }
  write_atomic(dir / "sketches.jsonl", [&](std::ostream& out) { write_canonical(out, records); });
  write_atomic(dir / "split.csv", [&](std::ostream& out) { write_split_csv(out, split); });
  write_atomic(dir / "classes.csv", [&](std::ostream& out) {
    out << "class_id,word\n";
    std::map<int, std::string> by_id;
    for (const auto& [w, id] : class_of) by_id.emplace(id, w);
    for (const auto& [id, w] : by_id) out << id << ',' << w << '\n';
  });
}

void cmd_entropy_stats(const Options& o, RunConfig& cfg, const fs::path& dir, Plan& p, bool run) {
  require_file("data", o.data);
  p.reads = {o.data};
  if (!o.split.empty()) {
    require_file("split", o.split);
    p.reads.push_back(o.split);
  }
  p.writes = {"entropy.csv", "bands.csv", "histogram.csv"};
  p.steps = {"rasterize at " + std::to_string(cfg.encoder.raster_size), "per-sample entropy", "per-class percentile bands"};
  if (!run) return;
  std::vector<SketchSample> samples;
  if (o.split.empty())
    samples = make_samples(parse_stroke_file(o.data, StrokeFormat::canonical), cfg.encoder.raster_size);
  else
    samples = load_split(o, cfg, Split::train);
  auto records = entropy_records(samples);
  auto bands = class_bands(records, cfg.schedule.phi, cfg.schedule.varphi);
  std::map<int, const ClassEntropyBand*> band_of;
  for (const auto& b : bands) band_of[b.class_id] = &b;
  std::map<int, std::pair<int, int>> kept;
  for (const auto& r : records) {
    auto& [k, n] = kept[r.class_id];
    k += gate(r, *band_of.at(r.class_id));
    ++n;
  }
  char buf[128];
  write_atomic(dir / "entropy.csv", [&](std::ostream& out) {
    out << "class_id,sample_id,entropy\n";
    for (const auto& r : records) {
      std::snprintf(buf, sizeof buf, "%d,%lld,%.10g\n", r.class_id, static_cast<long long>(r.sample_id), r.entropy);
      out << buf;
    }
  });
  write_atomic(dir / "bands.csv", [&](std::ostream& out) {
    out << "class_id,h_lower,h_upper,kept,total\n";
    for (const auto& b : bands) {
      std::snprintf(buf, sizeof buf, "%d,%.10g,%.10g,%d,%d\n", b.class_id, b.h_lower, b.h_upper, kept[b.class_id].first,
                    kept[b.class_id].second);
      out << buf;
    }
  });
  write_atomic(dir / "histogram.csv", [&](std::ostream& out) {
    out << "bin_lo,bin_hi,count\n";
    for (const auto& h : entropy_histogram(records, o.bins)) {
      std::snprintf(buf, sizeof buf, "%.10g,%.10g,%zu\n", h.lo, h.hi, static_cast<std::size_t>(h.count));
      out << buf;
    }
  });
}

void cmd_train_hash(const Options& o, RunConfig& cfg, const fs::path& dir, Plan& p, bool run) {
  require_file("data", o.data);
  require_file("split", o.split);
  p.reads = {o.data, o.split};
  p.writes = {"ckpt_<stage>.sfck", "model.sfck", "centers.sfcn", "train_codes.sfhc", "train_log.jsonl"};
  p.steps = {"pretrain cnn (" + std::to_string(cfg.schedule.pretrain_cnn_epochs) + " epochs)",
             "pretrain rnn (" + std::to_string(cfg.schedule.pretrain_rnn_epochs) + " epochs)",
             "fuse (" + std::to_string(cfg.schedule.fuse_epochs) + " epochs)",
             "entropy-gated centers, center stage (" + std::to_string(cfg.schedule.scl_epochs) + " epochs)",
             "alternate codes/network (" + std::to_string(cfg.schedule.alt_iterations) + " x " +
                 std::to_string(cfg.schedule.inner_epochs) + " epochs)",
             std::string("variant ") + std::string(to_string(cfg.schedule.variant))};
  if (!run) return;
  auto train = load_split(o, cfg, Split::train);
  const std::set<int> excluded(cfg.data.exclude_classes.begin(), cfg.data.exclude_classes.end());
  std::erase_if(train, [&](const SketchSample& s) { return excluded.count(s.class_id) != 0; });
  auto model = train_hashing<Real>(train, cfg.encoder, cfg.schedule, [&](const std::string& stage, const ad::ParameterSet<Real>& params) {
    save_params(dir / ("ckpt_" + stage + ".sfck"), params);
  });
  save_params(dir / "model.sfck", model.params);
  write_atomic(dir / "centers.sfcn", [&](std::ostream& out) { save_centers(out, model.centers); });
  write_atomic(dir / "train_codes.sfhc", [&](std::ostream& out) { save_codes(out, model.codes); });
  write_log(dir / "train_log.jsonl", model.log);
}

Split parse_which(const std::string& w) {
  try {
    return parse_split(w);
  } catch (const Error&) {
    fail(ErrorKind::ConfigError, "--which must be train, val, gallery or query");
  }
}

void cmd_encode(const Options& o, RunConfig& cfg, const fs::path& dir, Plan& p, bool run) {
  require_file("data", o.data);
  require_file("split", o.split);
  require_file("checkpoint", o.checkpoint);
  const Split which = parse_which(o.which);
  p.reads = {o.data, o.split, o.checkpoint};
  p.writes = {"codes_" + o.which + ".sfhc"};
  p.steps = {"encode the " + o.which + " split to " + std::to_string(cfg.encoder.fusion_dim) + "-bit codes"};
  if (!run) return;
  auto params = read_checkpoint(o.checkpoint);
  auto samples = load_split(o, cfg, which);
  auto store = encode_gallery<Real>(samples, params, cfg.encoder, cfg.threads);
  write_atomic(dir / ("codes_" + o.which + ".sfhc"), [&](std::ostream& out) { save_codes(out, store); });
}

void cmd_retrieve(const Options& o, RunConfig&, const fs::path& dir, Plan& p, bool run) {
  if (o.gallery.size() != 1 || o.query.size() != 1) fail(ErrorKind::ConfigError, "retrieve takes one --gallery and one --query");
  require_file("gallery", o.gallery[0]);
  require_file("query", o.query[0]);
  p.reads = {o.gallery[0], o.query[0]};
  p.writes = {"ranking.csv"};
  p.steps = {o.k ? "rank top " + std::to_string(*o.k) + " per query" : std::string("rank the full gallery per query")};
  if (!run) return;
  auto gallery = read_codes(o.gallery[0]);
  auto queries = read_codes(o.query[0]);
  write_atomic(dir / "ranking.csv", [&](std::ostream& out) {
    out << "query_id,rank,sample_id,class_id,distance\n";
    for (std::size_t i = 0; i < queries.size(); ++i) {
      const auto q = queries.code(i);
      const auto hits = retrieve(q, gallery, o.k);
      for (std::size_t r = 0; r < hits.size(); ++r)
        out << q.sample_id << ',' << r + 1 << ',' << hits[r].sample_id << ',' << hits[r].class_id << ',' << hits[r].distance << '\n';
    }
  });
}

void cmd_eval_retrieval(const Options& o, RunConfig& cfg, const fs::path& dir, Plan& p, bool run) {
  if (o.gallery.empty() || o.gallery.size() != o.query.size())
    fail(ErrorKind::ConfigError, "eval-retrieval takes matching --gallery/--query pairs");
  for (std::size_t i = 0; i < o.gallery.size(); ++i) {
    require_file("gallery", o.gallery[i]);
    require_file("query", o.query[i]);
    p.reads.push_back(o.gallery[i]);
    p.reads.push_back(o.query[i]);
  }
  p.writes = {"metrics.csv"};
  p.steps = {"MAP and precision@k per code length"};
  if (!run) return;
  std::vector<MetricRow> rows;
  for (std::size_t i = 0; i < o.gallery.size(); ++i) {
    auto gallery = read_codes(o.gallery[i]);
    auto queries = read_codes(o.query[i]);
    auto results = retrieve_all(queries, gallery);
    rows.push_back({"map", gallery.bits(), mean_average_precision(results)});
    for (int k : cfg.eval.precision_k) {
      double s = 0.0;
      for (const auto& r : results) s += precision_at_k(r, static_cast<std::size_t>(k));
      rows.push_back({"precision@" + std::to_string(k), gallery.bits(), s / static_cast<double>(results.size())});
    }
  }
  write_atomic(dir / "metrics.csv", [&](std::ostream& out) { write_metrics_csv(out, rows); });
}

void cmd_stats_distance(const Options& o, RunConfig& cfg, const fs::path& dir, Plan& p, bool run) {
  require_file("data", o.data);
  require_file("split", o.split);
  require_file("checkpoint", o.checkpoint);
  const Split which = parse_which(o.which);
  p.reads = {o.data, o.split, o.checkpoint};
  p.writes = {"distance.csv"};
  p.steps = {"fusion features of the " + o.which + " split", "centroid-based d1, d2, d1/d2"};
  if (!run) return;
  auto params = read_checkpoint(o.checkpoint);
  check_topology(params, cfg.encoder);
  auto samples = load_split(o, cfg, which);
  auto inputs = prepare_inputs<Real>(samples);
  auto feats = extract_features<Real>(inputs, params, cfg.encoder, cfg.threads);
  std::vector<LabeledFeature> lf;
  for (std::size_t i = 0; i < samples.size(); ++i) lf.push_back({samples[i].sample_id, samples[i].class_id, feats[i]});
  const auto st = distance_stats(lf);
  std::vector<MetricRow> rows{{"d1", cfg.encoder.fusion_dim, st.d1}, {"d2", cfg.encoder.fusion_dim, st.d2}};
  if (st.ratio) rows.push_back({"d1/d2", cfg.encoder.fusion_dim, *st.ratio});
  write_atomic(dir / "distance.csv", [&](std::ostream& out) { write_metrics_csv(out, rows); });
}

void cmd_build_prototypes(const Options& o, RunConfig& cfg, const fs::path& dir, Plan& p, bool run) {
  require_file("checkpoint", o.checkpoint);
  p.reads = {o.checkpoint};
  p.writes = {"prototypes.jsonl"};
  p.steps = {"render " + std::to_string(cfg.zsl.aux_per_class) + " clean auxiliary sample(s) per class",
             "mean sketch-encoder feature per class"};
  if (!run) return;
  auto se = read_checkpoint(o.checkpoint);
  check_topology(se, se_config(cfg));
  auto protos = auxiliary_prototypes(cfg, se);
  write_atomic(dir / "prototypes.jsonl", [&](std::ostream& out) { write_prototypes(out, protos); });
}

void cmd_train_zsl(const Options& o, RunConfig& cfg, const fs::path& dir, Plan& p, bool run) {
  require_file("data", o.data);
  require_file("split", o.split);
  p.reads = {o.data, o.split};
  if (!o.se.empty()) {
    require_file("se", o.se);
    p.reads.push_back(o.se);
  } else {
    p.steps.push_back("train the sketch encoder on seen classes (relu fusion)");
    p.writes.push_back("se.sfck");
  }
  if (!o.prototypes.empty()) {
    require_file("prototypes", o.prototypes);
    p.reads.push_back(o.prototypes);
  } else {
    p.steps.push_back("build prototypes from auxiliary renderings");
    p.writes.push_back("prototypes.jsonl");
  }
  p.steps.push_back("train the embedding subnet (" + std::to_string(cfg.zsl.schedule.epochs) + " epochs, rmsprop)");
  p.writes.insert(p.writes.end(), {"eve.sfck", "train_log.jsonl"});
  if (!run) return;
  const std::set<int> unseen(cfg.zsl.unseen.begin(), cfg.zsl.unseen.end());
  auto train = load_split(o, cfg, Split::train);
  std::vector<SketchSample> seen;
  for (auto& s : train)
    if (!unseen.count(s.class_id)) seen.push_back(std::move(s));
  const EncoderConfig sc = se_config(cfg);
  std::vector<TrainLogEntry> log;
  ad::ParameterSet<Real> se;
  if (o.se.empty()) {
    auto m = train_sketch_encoder<Real>(seen, sc, cfg.schedule);
    se = std::move(m.params);
    log = std::move(m.log);
    save_params(dir / "se.sfck", se);
  } else {
    se = read_checkpoint(o.se);
  }
  std::vector<ClassPrototype> protos;
  if (o.prototypes.empty()) {
    protos = auxiliary_prototypes(cfg, se);
    write_atomic(dir / "prototypes.jsonl", [&](std::ostream& out) { write_prototypes(out, protos); });
  } else {
    protos = read_prototype_file(o.prototypes);
  }
  std::vector<ClassPrototype> seen_protos;
  for (const auto& pr : protos)
    if (!unseen.count(pr.class_id)) seen_protos.push_back(pr);
  auto model = train_zsl<Real>(seen, seen_protos, se, sc, eve_config(cfg), cfg.zsl.schedule, cfg.zsl.unseen, cfg.threads);
  log.insert(log.end(), model.log.begin(), model.log.end());
  save_params(dir / "eve.sfck", model.eve);
  write_log(dir / "train_log.jsonl", log);
}

void cmd_eval_zsl(const Options& o, RunConfig& cfg, const fs::path& dir, Plan& p, bool run) {
  for (auto [flag, path] : {std::pair{"data", &o.data}, {"split", &o.split}, {"se", &o.se}, {"eve", &o.eve}, {"prototypes", &o.prototypes}}) {
    require_file(flag, *path);
    p.reads.push_back(*path);
  }
  p.writes = {"metrics.csv"};
  p.steps = {"rank prototypes for unseen-class " + o.which + " samples in zsl and gzsl mode"};
  if (!run) return;
  const Split which = parse_which(o.which);
  const EncoderConfig sc = se_config(cfg);
  const EveConfig ec = eve_config(cfg);
  auto se = read_checkpoint(o.se);
  auto eve = read_checkpoint(o.eve);
  check_topology(se, sc);
  auto protos = read_prototype_file(o.prototypes);
  auto candidates = embed_candidates<Real>(protos, eve, ec);
  const std::set<int> unseen(cfg.zsl.unseen.begin(), cfg.zsl.unseen.end());
  std::vector<SketchSample> queries;
  for (auto& s : load_split(o, cfg, which))
    if (unseen.count(s.class_id)) queries.push_back(std::move(s));
  if (queries.empty()) fail(ErrorKind::EmptyBatch, "no unseen-class samples in the " + o.which + " split");
  std::vector<MetricRow> rows;
  for (ZslMode mode : {ZslMode::zsl, ZslMode::gzsl}) {
    std::vector<std::vector<int>> rankings;
    std::vector<int> truths;
    for (const auto& q : queries) {
      std::vector<int> ids;
      for (const auto& r : classify_zsl<Real>(q, candidates, se, sc, eve, ec, mode, cfg.zsl.unseen)) ids.push_back(r.class_id);
      rankings.push_back(std::move(ids));
      truths.push_back(q.class_id);
    }
    const std::string prefix = mode == ZslMode::zsl ? "zsl_hit@" : "gzsl_hit@";
    for (int k : cfg.eval.hit_k)
      rows.push_back({prefix + std::to_string(k), sc.fusion_dim, hit_at_k(rankings, truths, static_cast<std::size_t>(k))});
  }
  write_atomic(dir / "metrics.csv", [&](std::ostream& out) { write_metrics_csv(out, rows); });
}

void cmd_eval_recognition(const Options& o, RunConfig& cfg, const fs::path& dir, Plan& p, bool run) {
  require_file("data", o.data);
  require_file("split", o.split);
  require_file("checkpoint", o.checkpoint);
  p.reads = {o.data, o.split, o.checkpoint};
  p.writes = {"metrics.csv"};
  p.steps = {"classify the " + o.which + " split with the fused classifier head"};
  if (!run) return;
  const Split which = parse_which(o.which);
  auto params = read_checkpoint(o.checkpoint);
  check_topology(params, cfg.encoder);
  auto samples = load_split(o, cfg, which);
  auto inputs = prepare_inputs<Real>(samples);
  auto feats = extract_features<Real>(inputs, params, cfg.encoder, cfg.threads);
  const auto head = extract_head(params);
  std::vector<int> pred, truth;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    pred.push_back(argmax(classify(feats[i], head)));
    truth.push_back(samples[i].class_id);
  }
  std::vector<MetricRow> rows{{"accuracy", cfg.encoder.fusion_dim, classification_accuracy(pred, truth)}};
  write_atomic(dir / "metrics.csv", [&](std::ostream& out) { write_metrics_csv(out, rows); });
}

void cmd_export_pr(const Options& o, RunConfig&, const fs::path& dir, Plan& p, bool run) {
  if (o.gallery.size() != 1 || o.query.size() != 1) fail(ErrorKind::ConfigError, "export-pr takes one --gallery and one --query");
  require_file("gallery", o.gallery[0]);
  require_file("query", o.query[0]);
  p.reads = {o.gallery[0], o.query[0]};
  p.writes = {"pr.csv"};
  p.steps = {"mean precision-recall curve over all queries"};
  if (!run) return;
  auto results = retrieve_all(read_codes(o.query[0]), read_codes(o.gallery[0]));
  auto curve = mean_precision_recall(results);
  write_atomic(dir / "pr.csv", [&](std::ostream& out) { write_pr_csv(out, curve); });
}

using Command = void (*)(const Options&, RunConfig&, const fs::path&, Plan&, bool);

void print_error(ErrorKind outer, const Error* inner, const std::string& message) {
  nlohmann::ordered_json j;
  j["error"] = std::string(to_string(outer));
  if (inner) j["kind"] = std::string(to_string(inner->kind()));
  j["message"] = message;
  std::cerr << j.dump() << std::endl;
}

/// Identity of a run: command, full config, and every input flag.
std::string run_key(const std::string& command, const RunConfig& cfg, const Options& o) {
  std::ostringstream s;
  s << command << '\n' << dump_config(cfg);
  s << "data=" << o.data << "\nsplit=" << o.split << "\ncheckpoint=" << o.checkpoint << "\nse=" << o.se << "\neve=" << o.eve
    << "\nprototypes=" << o.prototypes << "\ninput=" << o.input << "\nformat=" << o.format << "\nwhich=" << o.which
    << "\nbins=" << o.bins << "\nk=" << (o.k ? std::to_string(*o.k) : "all");
  for (const auto& g : o.gallery) s << "\ngallery=" << g;
  for (const auto& q : o.query) s << "\nquery=" << q;
  if (o.classes) s << "\nclasses=" << *o.classes;
  if (o.per_class) s << "\nper_class=" << *o.per_class;
  return s.str();
}

int execute(const std::string& name, Command cmd, const Options& o) {
  RunConfig cfg;
  Plan plan;
  fs::path dir;
  try {
    if (!o.config_path.empty()) {
      if (!fs::is_regular_file(o.config_path)) fail(ErrorKind::MissingInput, "--config: no such file '" + o.config_path + "'");
      std::ifstream in(o.config_path);
      cfg = parse_config(in);
    }
    if (o.seed) cfg.seed = *o.seed;
    if (o.threads) cfg.threads = *o.threads;
    cfg.sync();
    cfg.validate();
    cmd(o, cfg, {}, plan, false);
    cfg.sync();
    dir = fs::path(o.out) / (name + "-" + hex64(fnv1a(run_key(name, cfg, o))));
  } catch (const Error& e) {
    const bool missing = e.kind() == ErrorKind::MissingInput;
    print_error(missing ? ErrorKind::MissingInput : ErrorKind::ConfigError, nullptr, e.what());
    return missing ? kExitMissingInput : kExitConfig;
  }

  if (o.dry_run) {
    std::cout << "command: " << name << "\nrun_dir: " << dir.string() << '\n';
    for (const auto& r : plan.reads) std::cout << "read: " << r << '\n';
    for (const auto& s : plan.steps) std::cout << "step: " << s << '\n';
    for (const auto& w : plan.writes) std::cout << "write: " << (dir / w).string() << '\n';
    return 0;
  }

  try {
    fs::create_directories(dir);
    write_atomic(dir / "config.ini", [&](std::ostream& out) { out << dump_config(cfg); });
    cmd(o, cfg, dir, plan, true);
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::MissingInput) {
      print_error(ErrorKind::MissingInput, nullptr, e.what());
      return kExitMissingInput;
    }
    print_error(ErrorKind::StageFailure, &e, e.what());
    return kExitStage;
  } catch (const std::exception& e) {
    print_error(ErrorKind::StageFailure, nullptr, e.what());
    return kExitStage;
  }
  std::cout << dir.string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sketch hashing and zero-shot recognition pipeline"};
  app.footer(
      "Exit codes: 0 success, 2 ConfigError (bad flags or config), 3 MissingInput, 4 StageFailure.\n"
      "Failures print one JSON line {\"error\", \"kind\", \"message\"} on stderr.");
  app.require_subcommand(1);
  app.fallthrough();

  Options o;
  app.add_option("--config", o.config_path, "key=value config file with [sections]");
  app.add_option("--seed", o.seed, "overrides run.seed");
  app.add_option("--threads", o.threads, "worker threads (outputs are reproducible per thread count)");
  app.add_flag("--dry-run", o.dry_run, "validate and print the plan without writing anything");
  app.add_option("--out", o.out, "root directory for run directories")->capture_default_str();

  struct Entry {
    const char* name;
    const char* help;
    Command cmd;
  };
  const std::vector<Entry> entries = {
      {"synth", "generate the synthetic shape dataset", cmd_synth},
      {"ingest", "convert QuickDraw or canonical JSONL to a canonical dataset", cmd_ingest},
      {"entropy-stats", "per-sample raster entropy and per-class bands", cmd_entropy_stats},
      {"train-hash", "staged hash training", cmd_train_hash},
      {"encode", "binary codes for one split", cmd_encode},
      {"retrieve", "Hamming ranking of queries against a gallery", cmd_retrieve},
      {"eval-retrieval", "MAP and precision@k per code length", cmd_eval_retrieval},
      {"stats-distance", "intra/inter-class feature distances", cmd_stats_distance},
      {"build-prototypes", "class prototypes from auxiliary renderings", cmd_build_prototypes},
      {"train-zsl", "zero-shot training (sketch encoder, then embedding subnet)", cmd_train_zsl},
      {"eval-zsl", "hit@k for unseen classes in zsl and gzsl mode", cmd_eval_zsl},
      {"eval-recognition", "classification accuracy of a trained encoder", cmd_eval_recognition},
      {"export-pr", "mean precision-recall curve as CSV", cmd_export_pr},
  };
  for (const auto& e : entries) {
    auto* sub = app.add_subcommand(e.name, e.help);
    sub->add_option("--data", o.data, "canonical sketches JSONL");
    sub->add_option("--split", o.split, "split CSV");
    sub->add_option("--checkpoint", o.checkpoint, "model checkpoint");
    sub->add_option("--se", o.se, "sketch encoder checkpoint (zero-shot)");
    sub->add_option("--eve", o.eve, "embedding subnet checkpoint");
    sub->add_option("--prototypes", o.prototypes, "prototype JSONL");
    sub->add_option("--input", o.input, "raw stroke file");
    sub->add_option("--format", o.format, "quickdraw | canonical");
    sub->add_option("--which", o.which, "train | val | gallery | query");
    sub->add_option("--gallery", o.gallery, "gallery codes (repeatable)");
    sub->add_option("--query", o.query, "query codes (repeatable, paired with --gallery)");
    sub->add_option("--classes", o.classes, "number of classes");
    sub->add_option("--per-class", o.per_class, "samples per class");
    sub->add_option("-k", o.k, "truncate rankings");
    sub->add_option("--bins", o.bins, "histogram bins");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    print_error(ErrorKind::ConfigError, nullptr, e.what());
    return kExitConfig;
  }
  for (const auto& e : entries)
    if (app.got_subcommand(e.name)) return execute(e.name, e.cmd, o);
  return kExitConfig;
}
