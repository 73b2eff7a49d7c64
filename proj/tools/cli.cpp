#include "cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "pop/container.hpp"
#include "pop/continual.hpp"
#include "pop/data.hpp"
#include "pop/errors.hpp"
#include "pop/hash.hpp"
#include "pop/kvconfig.hpp"
#include "pop/vit.hpp"

namespace pop::cli {
namespace {

namespace fs = std::filesystem;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string read_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot read " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  os << content;
  if (!os) throw DataError("cannot write " + path.string());
}

void apply_sets(KvConfig& cfg, const std::vector<std::string>& sets) {
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + s + "'");
    cfg.set(s.substr(0, eq), s.substr(eq + 1));
  }
}

std::string metrics_root(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("POP_METRICS_DIR"); env && *env) return env;
  return "metrics";
}

std::string fmt(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

// ---------------------------------------------------------------- gen

struct GenOptions {
  std::string spec;
  std::string out;
  std::vector<std::string> sets;
  bool force = false;
};

std::string split_summary(const std::string& name, const data::Dataset& ds) {
  const auto classes = ds.class_ids();
  std::size_t lo = ds.size(), hi = 0;
  for (int c : classes) {
    lo = std::min(lo, ds.count_class(c));
    hi = std::max(hi, ds.count_class(c));
  }
  std::string per = classes.empty() ? "0" : lo == hi ? std::to_string(lo) : std::to_string(lo) + "-" + std::to_string(hi);
  return "split " + name + ": samples=" + std::to_string(ds.size()) + " classes=" + std::to_string(classes.size()) +
         " per_class=" + per;
}

int cmd_gen(const GenOptions& o) {
  auto cfg = data::DatasetSpec::schema();
  if (!o.spec.empty()) cfg.merge_file(o.spec);
  apply_sets(cfg, o.sets);
  const auto spec = data::DatasetSpec::from_config(cfg);
  const fs::path dir = o.out;
  for (const char* f : {data::kPretrainTrainFile, data::kPretrainTestFile, data::kClTrainFile, data::kClTestFile,
                        data::kSpecFile}) {
    if (fs::exists(dir / f) && !o.force) {
      throw UsageError((dir / f).string() + " exists; pass --force to overwrite");
    }
  }
  const auto g = data::generate(spec);
  data::save_generated(dir, spec, g);
  std::cout << "wrote " << dir.string() << "\n"
            << split_summary("pretrain_train", g.pretrain_train) << "\n"
            << split_summary("pretrain_test", g.pretrain_test) << "\n"
            << split_summary("cl_train", g.cl_train) << "\n"
            << split_summary("cl_test", g.cl_test) << "\n";
  return kOk;
}

// ---------------------------------------------------------------- pretrain

KvConfig pretrain_schema() {
  const vit::BackboneConfig b;
  const vit::PretrainSchedule s;
  return KvConfig({
      {"patch_size", KvType::Int, std::to_string(b.patch_size), "patch side in pixels"},
      {"embed_dim", KvType::Int, std::to_string(b.embed_dim), "token width d"},
      {"depth", KvType::Int, std::to_string(b.depth), "transformer blocks L"},
      {"heads", KvType::Int, std::to_string(b.heads), "attention heads"},
      {"mlp_ratio", KvType::Int, std::to_string(b.mlp_ratio), "MLP width / d"},
      {"epochs", KvType::Int, std::to_string(s.epochs), "pretraining epochs (0: random frozen backbone)"},
      {"batch_size", KvType::Int, std::to_string(s.batch_size), "minibatch size"},
      {"lr", KvType::Real, format_real(s.lr), "peak learning rate (cosine decay)"},
      {"weight_decay", KvType::Real, format_real(s.weight_decay), "L2 weight decay"},
      {"seed", KvType::Int, "1", "initialization and shuffling seed"},
      {"precision", KvType::String, "f32", "f32 or f64"},
  });
}

struct PretrainOptions {
  std::string data;
  std::string out;
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::size_t> epochs;
  std::optional<std::uint64_t> seed;
  std::string precision;
  bool force = false;
};

std::string dataset_hash(const fs::path& dir) { return sha256_hex(read_file(dir / data::kSpecFile)); }

template <typename T>
int pretrain_typed(const PretrainOptions& o, const KvConfig& cfg, const data::GeneratedData& d,
                   const std::string& config_hash) {
  vit::BackboneConfig bc;
  bc.image_size = d.pretrain_train.dims.height;
  bc.channels = d.pretrain_train.dims.channels;
  bc.patch_size = static_cast<std::size_t>(cfg.get_int("patch_size"));
  bc.embed_dim = static_cast<std::size_t>(cfg.get_int("embed_dim"));
  bc.depth = static_cast<std::size_t>(cfg.get_int("depth"));
  bc.heads = static_cast<std::size_t>(cfg.get_int("heads"));
  bc.mlp_ratio = static_cast<std::size_t>(cfg.get_int("mlp_ratio"));
  bc.validate();
  vit::PretrainSchedule sched;
  sched.epochs = static_cast<std::size_t>(cfg.get_int("epochs"));
  sched.batch_size = static_cast<std::size_t>(cfg.get_int("batch_size"));
  sched.lr = cfg.get_real("lr");
  sched.weight_decay = cfg.get_real("weight_decay");
  const auto seed = static_cast<std::uint64_t>(cfg.get_int("seed"));
  const auto cl_classes = d.cl_train.class_ids();
  const auto started = std::chrono::steady_clock::now();
  auto result = vit::pretrain_backbone<T>(d.pretrain_train, &d.pretrain_test, bc, sched, seed, cl_classes,
                                          [](std::size_t epoch, double loss) {
                                            std::cout << "epoch " << epoch + 1 << " loss " << fmt(loss) << "\n";
                                          });
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  Container c;
  result.backbone.save(c);
  for (const auto& [k, v] : parse_kv_text(cfg.to_text())) c.header["pretrain." + k] = v;
  c.header["pretrain.config_hash"] = config_hash;
  c.header["pretrain.train_accuracy"] = fmt(result.train_accuracy, 6);
  c.header["pretrain.heldout_accuracy"] = fmt(result.heldout_accuracy, 6);
  c.save(o.out);
  std::string manifest = cfg.to_text();
  manifest += "data = " + fs::absolute(o.data).string() + "\n";
  manifest += "dataset_hash = " + dataset_hash(o.data) + "\n";
  manifest += "config_hash = " + config_hash + "\n";
  manifest += "backbone_sha256 = " + result.backbone.weights_sha256() + "\n";
  manifest += "train_accuracy = " + fmt(result.train_accuracy, 6) + "\n";
  manifest += "heldout_accuracy = " + fmt(result.heldout_accuracy, 6) + "\n";
  manifest += "wall_clock_seconds = " + fmt(seconds, 1) + "\n";
  write_file(o.out + ".manifest", manifest);
  std::cout << "pretrain accuracy train " << fmt(result.train_accuracy) << " heldout "
            << fmt(result.heldout_accuracy) << "\n"
            << "wrote " << o.out << "\n";
  return kOk;
}

int cmd_pretrain(const PretrainOptions& o) {
  auto cfg = pretrain_schema();
  if (!o.config.empty()) cfg.merge_file(o.config);
  apply_sets(cfg, o.sets);
  if (o.epochs) cfg.set("epochs", std::to_string(*o.epochs));
  if (o.seed) cfg.set("seed", std::to_string(*o.seed));
  if (!o.precision.empty()) cfg.set("precision", o.precision);
  const auto precision = parse_precision(cfg.get_string("precision"));
  const auto config_hash = sha256_hex(cfg.to_text() + "dataset_hash = " + dataset_hash(o.data) + "\n");

  if (fs::exists(o.out) && !o.force) {
    const auto existing = Container::load(o.out);
    const auto it = existing.header.find("pretrain.config_hash");
    if (it == existing.header.end() || it->second != config_hash) {
      throw DataError(o.out + " was produced by a different configuration (config hash mismatch); pass --force");
    }
    std::cout << o.out << " is up to date (config hash " << config_hash.substr(0, 12) << ")\n";
    return kOk;
  }
  const auto d = data::load_generated(o.data);
  return precision == Precision::F64 ? pretrain_typed<double>(o, cfg, d, config_hash)
                                     : pretrain_typed<float>(o, cfg, d, config_hash);
}

// ---------------------------------------------------------------- cil

struct CilOptions {
  std::string data;
  std::string backbone;
  std::string config;
  std::string replay;
  std::string out;
  std::vector<std::string> sets;
  std::vector<std::uint64_t> seeds;
  std::string precision = "f32";
  std::optional<std::string> fusion;
  std::optional<std::size_t> prompts_per_task, pop_tokens, buffer, kshot, epochs, tasks;
  std::optional<double> lambda_task, lambda_aux;
  bool buffer_only = false, joint = false, spt = false, dpt = false;
  bool force = false, quiet = false;
};

constexpr const char* kManifestFile = "manifest.txt";
constexpr const char* kMetricsFile = "metrics.csv";
constexpr const char* kCheckpointFile = "checkpoint.bin";

std::string without_seed(const std::string& config_text) {
  std::istringstream is(config_text);
  std::string line, out;
  while (std::getline(is, line)) {
    if (line.rfind("seed ", 0) != 0) out += line + "\n";
  }
  return out;
}

struct CilRun {
  ClConfig config;
  std::string precision;
  fs::path data;
  fs::path backbone;
};

template <typename T>
void run_seed(const CilRun& run, const std::string& run_id, const fs::path& dir, const std::string& backbone_sha,
              const std::string& data_hash, bool quiet) {
  const auto d = data::load_generated(run.data);
  const auto tasks = data::split_tasks(d.cl_train, d.cl_test, run.config.tasks);
  const auto backbone = vit::Backbone<T>::load(Container::load(run.backbone));
  ContinualLearner<T> learner(backbone, run.config, run_id);
  const auto started = std::chrono::steady_clock::now();
  for (const auto& spec : tasks) {
    const auto r = learner.run_task(spec);
    if (!quiet) {
      std::cout << "seed " << run.config.seed << " task " << r.task << ": A_t " << fmt(r.accuracy) << " loss "
                << fmt(r.main_loss) << " train samples " << r.train_samples << "\n";
    }
  }
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  const auto csv = learner.log().to_csv();
  write_file(dir / kMetricsFile, csv);
  Container ckpt;
  learner.save(ckpt);
  ckpt.save(dir / kCheckpointFile);

  const auto cfg_text = run.config.to_config().to_text();
  std::string m;
  m += "run_id = " + run_id + "\n";
  m += "config_hash = " + sha256_hex(cfg_text + "precision = " + run.precision + "\n" + backbone_sha + data_hash) + "\n";
  m += "seed = " + std::to_string(run.config.seed) + "\n";
  m += "precision = " + run.precision + "\n";
  m += "data = " + fs::absolute(run.data).string() + "\n";
  m += "dataset_hash = " + data_hash + "\n";
  m += "backbone = " + fs::absolute(run.backbone).string() + "\n";
  m += "backbone_sha256 = " + backbone_sha + "\n";
  m += "feature_dim = " +
       std::to_string(run.config.feature_dim(backbone.config().embed_dim, static_cast<int>(run.config.tasks))) + "\n";
  m += "task_split = ";
  for (const auto& t : tasks) {
    m += (t.task > 1 ? ";" : "") + std::to_string(t.task) + ":";
    for (std::size_t i = 0; i < t.classes.size(); ++i) m += (i ? "," : "") + std::to_string(t.classes[i]);
  }
  m += "\n";
  m += "metrics_blob = " + git_blob_hash(csv) + "\n";
  m += "aa = " + fmt(learner.log().average(), 6) + "\n";
  m += "wall_clock_seconds = " + fmt(seconds, 1) + "\n";
  for (const auto& [k, v] : parse_kv_text(cfg_text)) m += "cl." + k + " = " + v + "\n";
  write_file(dir / kManifestFile, m);
  std::cout << "seed " << run.config.seed << " AA " << fmt(learner.log().average()) << " -> " << dir.string()
            << "\n";
}

CilRun resolve_cil(const CilOptions& o) {
  CilRun run;
  auto cfg = ClConfig::schema();
  if (!o.replay.empty()) {
    const auto manifest = parse_kv_text(read_file(o.replay), o.replay);
    for (const auto& [k, v] : manifest) {
      if (k.rfind("cl.", 0) == 0) cfg.set(k.substr(3), v);
    }
    auto field = [&](const char* key) {
      const auto it = manifest.find(key);
      if (it == manifest.end()) throw DataError(o.replay + ": manifest lacks '" + key + "'");
      return it->second;
    };
    run.data = field("data");
    run.backbone = field("backbone");
    run.precision = field("precision");
  } else {
    if (!o.config.empty()) cfg.merge_file(o.config);
    run.data = o.data;
    run.backbone = o.backbone;
    run.precision = o.precision;
  }
  apply_sets(cfg, o.sets);
  if (o.fusion) cfg.set("fusion", *o.fusion);
  if (o.prompts_per_task) cfg.set("prompts_per_task", std::to_string(*o.prompts_per_task));
  if (o.pop_tokens) cfg.set("pop_tokens", std::to_string(*o.pop_tokens));
  if (o.buffer) cfg.set("buffer", std::to_string(*o.buffer));
  if (o.kshot) cfg.set("kshot", std::to_string(*o.kshot));
  if (o.epochs) cfg.set("epochs", std::to_string(*o.epochs));
  if (o.tasks) cfg.set("tasks", std::to_string(*o.tasks));
  if (o.lambda_task) cfg.set("lambda_task", format_real(*o.lambda_task));
  if (o.lambda_aux) cfg.set("lambda_aux", format_real(*o.lambda_aux));
  if (o.buffer_only) cfg.set("buffer_only", "true");
  if (o.joint) cfg.set("joint", "true");
  if (o.spt && o.dpt) throw UsageError("--spt and --dpt are exclusive");
  if (o.spt) cfg.set("mode", "spt");
  if (o.dpt) cfg.set("mode", "dpt");
  (void)parse_precision(run.precision);
  run.config = ClConfig::from_config(cfg);
  if (run.data.empty()) throw UsageError("cil: --data is required");
  if (run.backbone.empty()) throw UsageError("cil: --backbone is required");
  return run;
}

int cmd_cil(const CilOptions& o) {
  auto run = resolve_cil(o);
  if (!fs::exists(run.backbone)) throw DataError("backbone checkpoint " + run.backbone.string() + " not found");
  if (!fs::exists(run.data / data::kSpecFile)) throw DataError("dataset " + run.data.string() + " not found");
  const auto backbone_ckpt = Container::load(run.backbone);
  const auto backbone_sha = run.precision == "f64" ? vit::Backbone<double>::load(backbone_ckpt).weights_sha256()
                                                   : vit::Backbone<float>::load(backbone_ckpt).weights_sha256();
  const auto data_hash = dataset_hash(run.data);
  const auto base_text = run.config.to_config().to_text();
  const auto run_id =
      sha256_hex(without_seed(base_text) + "precision = " + run.precision + "\n" + backbone_sha + data_hash)
          .substr(0, 12);
  std::vector<std::uint64_t> seeds = o.seeds;
  if (seeds.empty()) seeds.push_back(run.config.seed);
  const fs::path root = metrics_root(o.out);
  std::cout << "run " << run_id << " fusion " << fusion_name(run.config.fusion) << " feature_dim "
            << run.config.feature_dim(vit::BackboneConfig::read_header(backbone_ckpt).embed_dim,
                                      static_cast<int>(run.config.tasks))
            << " lambda_task " << format_real(run.config.weights.task) << " lambda_aux "
            << format_real(run.config.weights.aux) << "\n";
  for (auto seed : seeds) {
    run.config.seed = seed;
    const fs::path dir = root / run_id / ("seed_" + std::to_string(seed));
    if (fs::exists(dir / kMetricsFile) && !o.force) {
      std::cout << "seed " << seed << " already complete in " << dir.string() << " (use --force to rerun)\n";
      continue;
    }
    if (run.precision == "f64") {
      run_seed<double>(run, run_id, dir, backbone_sha, data_hash, o.quiet);
    } else {
      run_seed<float>(run, run_id, dir, backbone_sha, data_hash, o.quiet);
    }
  }
  return kOk;
}

// ---------------------------------------------------------------- report

struct RunRecord {
  std::map<std::string, std::string> manifest;
  double aa = 0;
};

double read_aa(const fs::path& csv) {
  std::istringstream is(read_file(csv));
  std::string line;
  while (std::getline(is, line)) {
    std::vector<std::string> cols;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cols.push_back(cell);
    if (cols.size() == 6 && cols[2] == "all" && cols[4] == "AA") return std::stod(cols[5]);
  }
  throw DataError(csv.string() + ": no AA summary row");
}

struct Stats {
  std::size_t n = 0;
  double mean = 0;
  double std = 0;
};

Stats stats(const std::vector<double>& v) {
  Stats s;
  s.n = v.size();
  if (v.empty()) return s;
  for (double x : v) s.mean += x;
  s.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return s;
}

std::string stats_cells(const Stats& s) {
  if (s.n == 0) return "0,,";
  return std::to_string(s.n) + "," + fmt(s.mean, 6) + "," + fmt(s.std, 6);
}

int cmd_report(const std::string& metrics_flag, const std::string& out_flag) {
  const fs::path root = metrics_root(metrics_flag);
  if (!fs::is_directory(root)) throw DataError("metrics directory " + root.string() + " not found");
  std::vector<RunRecord> runs;
  std::vector<fs::path> manifests;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file() && e.path().filename() == kManifestFile &&
        fs::exists(e.path().parent_path() / kMetricsFile)) {
      manifests.push_back(e.path());
    }
  }
  std::sort(manifests.begin(), manifests.end());
  for (const auto& p : manifests) {
    RunRecord r;
    r.manifest = parse_kv_text(read_file(p), p.string());
    r.aa = read_aa(p.parent_path() / kMetricsFile);
    runs.push_back(std::move(r));
  }
  if (runs.empty()) throw DataError("no runs found under " + root.string());

  auto key = [](const RunRecord& r, const std::string& k) {
    const auto it = r.manifest.find(k);
    return it == r.manifest.end() ? std::string("?") : it->second;
  };
  std::map<std::string, std::vector<const RunRecord*>> groups;
  for (const auto& r : runs) groups[key(r, "run_id")].push_back(&r);

  const fs::path out = out_flag.empty() ? root / "report" : fs::path(out_flag);
  std::string summary =
      "run_id,mode,fusion,prompts_per_task,buffer,kshot,buffer_only,joint,lambda_task,lambda_aux,n,aa_mean,aa_std\n";
  std::printf("%-12s %-4s %-12s %2s %6s %5s %-5s %3s %9s %8s\n", "run_id", "mode", "fusion", "m", "buffer", "kshot",
              "bonly", "n", "AA mean", "AA std");
  for (const auto& [id, members] : groups) {
    std::vector<double> aa;
    for (const auto* r : members) aa.push_back(r->aa);
    const auto s = stats(aa);
    const auto& f = *members.front();
    summary += id + "," + key(f, "cl.mode") + "," + key(f, "cl.fusion") + "," + key(f, "cl.prompts_per_task") + "," +
               key(f, "cl.buffer") + "," + key(f, "cl.kshot") + "," + key(f, "cl.buffer_only") + "," +
               key(f, "cl.joint") + "," + key(f, "cl.lambda_task") + "," + key(f, "cl.lambda_aux") + "," +
               stats_cells(s) + "\n";
    std::printf("%-12s %-4s %-12s %2s %6s %5s %-5s %3zu %9.4f %8.4f\n", id.c_str(), key(f, "cl.mode").c_str(),
                key(f, "cl.fusion").c_str(), key(f, "cl.prompts_per_task").c_str(), key(f, "cl.buffer").c_str(),
                key(f, "cl.kshot").c_str(), key(f, "cl.buffer_only").c_str(), s.n, s.mean, s.std);
  }
  write_file(out / "summary.csv", summary);

  auto figure = [&](const std::string& file, const std::string& column, const std::string& manifest_key,
                    std::vector<std::string> fixed_rows) {
    std::map<std::string, std::vector<double>> by;
    for (const auto& r : runs) by[key(r, manifest_key)].push_back(r.aa);
    std::vector<std::string> rows = fixed_rows;
    if (rows.empty()) {
      for (const auto& [v, list] : by) rows.push_back(v);
      std::sort(rows.begin(), rows.end(), [](const std::string& a, const std::string& b) {
        const bool na = !a.empty() && std::all_of(a.begin(), a.end(), ::isdigit);
        const bool nb = !b.empty() && std::all_of(b.begin(), b.end(), ::isdigit);
        if (na && nb) return std::stoll(a) < std::stoll(b);
        return a < b;
      });
    }
    std::string csv = column + ",n,aa_mean,aa_std\n";
    for (const auto& v : rows) {
      const auto it = by.find(v);
      csv += v + "," + stats_cells(stats(it == by.end() ? std::vector<double>{} : it->second)) + "\n";
    }
    write_file(out / file, csv);
  };
  std::vector<std::string> fusions;
  for (auto m : kAllFusionMethods) fusions.emplace_back(fusion_name(m));
  figure("fig_kshot.csv", "kshot", "cl.kshot", {});
  figure("fig_buffer.csv", "buffer", "cl.buffer", {});
  figure("fig_prompts.csv", "prompts_per_task", "cl.prompts_per_task", {});
  figure("fig_fusion.csv", "fusion", "cl.fusion", fusions);
  std::cout << runs.size() << " runs in " << groups.size() << " configurations; tables in " << out.string() << "\n";
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"Prompt-of-prompts continual learning at desk scale", "pop"};
  app.require_subcommand(1);

  GenOptions gen;
  auto* g = app.add_subcommand("gen", "generate the synthetic benchmark");
  g->add_option("--spec", gen.spec, "dataset spec file (key = value)");
  g->add_option("--out", gen.out, "output directory")->required();
  g->add_option("--set", gen.sets, "override a spec key (key=value)");
  g->add_flag("--force", gen.force, "overwrite existing files");

  PretrainOptions pre;
  auto* p = app.add_subcommand("pretrain", "pretrain and freeze the backbone");
  p->add_option("--data", pre.data, "dataset directory")->required();
  p->add_option("--out", pre.out, "backbone checkpoint path")->required();
  p->add_option("--config", pre.config, "pretraining config file");
  p->add_option("--set", pre.sets, "override a config key (key=value)");
  p->add_option("--epochs", pre.epochs, "pretraining epochs");
  p->add_option("--seed", pre.seed, "seed");
  p->add_option("--precision", pre.precision, "f32 or f64");
  p->add_flag("--force", pre.force, "overwrite an existing checkpoint");

  CilOptions cil;
  auto* c = app.add_subcommand("cil", "run class-incremental learning");
  c->add_option("--data", cil.data, "dataset directory");
  c->add_option("--backbone", cil.backbone, "frozen backbone checkpoint");
  c->add_option("--config", cil.config, "run config file");
  c->add_option("--replay", cil.replay, "rerun the configuration recorded in a manifest");
  c->add_option("--out", cil.out, "metrics root (default $POP_METRICS_DIR or ./metrics)");
  c->add_option("--set", cil.sets, "override a config key (key=value)");
  c->add_option("--seeds", cil.seeds, "seeds to run (one metrics CSV each)")->delimiter(',');
  c->add_option("--precision", cil.precision, "f32 or f64");
  c->add_option("--fusion", cil.fusion, "ff-cat|mean-of-all|max-pool|pop-only|mean-and-cat");
  c->add_option("--prompts-per-task", cil.prompts_per_task, "prompt tokens per task (m)");
  c->add_option("--pop-tokens", cil.pop_tokens, "POP tokens");
  c->add_option("--buffer", cil.buffer, "memory buffer capacity");
  c->add_option("--kshot", cil.kshot, "training samples per new class (0: all)");
  c->add_option("--epochs", cil.epochs, "main-stage epochs per task");
  c->add_option("--tasks", cil.tasks, "number of tasks");
  c->add_option("--lambda-task", cil.lambda_task, "task-id loss weight");
  c->add_option("--lambda-aux", cil.lambda_aux, "auxiliary loss weight");
  c->add_flag("--buffer-only", cil.buffer_only, "learn from the buffer only");
  c->add_flag("--joint", cil.joint, "joint-training reference");
  c->add_flag("--spt", cil.spt, "shallow prompt tuning");
  c->add_flag("--dpt", cil.dpt, "deep prompt tuning");
  c->add_flag("--force", cil.force, "rerun seeds that already have metrics");
  c->add_flag("--quiet", cil.quiet, "only print the per-seed summary");

  std::string report_metrics, report_out;
  auto* r = app.add_subcommand("report", "aggregate runs into summary tables");
  r->add_option("--metrics", report_metrics, "metrics root (default $POP_METRICS_DIR or ./metrics)");
  r->add_option("--out", report_out, "output directory for tables (default <metrics>/report)");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kUsage;
  }

  try {
    if (*g) return cmd_gen(gen);
    if (*p) return cmd_pretrain(pre);
    if (*c) return cmd_cil(cil);
    if (*r) return cmd_report(report_metrics, report_out);
    return kUsage;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const InvalidArgument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kDataError;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kDataError;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return kInvariant;
  }
}

}  // namespace pop::cli
