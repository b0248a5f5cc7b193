// pointform: generate synthetic clouds, embed them, run the two training
// stages, execute the invariant suites, dump attention, and account for
// parameters and FLOPs. Every command prints a JSON report (schema field
// included) and drops deterministic artifacts under --out.

#include <cstdlib>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "pointform/checks.hpp"

namespace {

using nlohmann::ordered_json;
using Store = pf::ParamStore<double>;

constexpr const char* kSchema = "pointform-report/1";

struct Usage : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Args {
  std::string command;
  std::map<std::string, std::string> flags;

  bool has(const std::string& name) const { return flags.count(name) > 0; }
  std::string get(const std::string& name, const std::string& fallback = "") const {
    auto it = flags.find(name);
    return it == flags.end() ? fallback : it->second;
  }
  std::size_t number(const std::string& name, std::size_t fallback) const {
    if (!has(name)) return fallback;
    return pf::detail::parse_number<std::size_t>(get(name), "--" + name);
  }
};

const std::map<std::string, std::set<std::string>>& command_flags() {
  static const std::set<std::string> common{"config", "preset", "seed", "out",
                                            "format"};
  static const std::map<std::string, std::set<std::string>> table = [] {
    auto with = [](std::initializer_list<const char*> extra) {
      std::set<std::string> s = common;
      for (auto e : extra) s.insert(e);
      return s;
    };
    return std::map<std::string, std::set<std::string>>{
        {"gen", with({})},
        {"embed", with({"cloud"})},
        {"pretrain", with({"steps"})},
        {"tune", with({"steps", "init"})},
        {"check", with({"suite"})},
        {"attn-dump", with({"cloud", "layer"})},
        {"count", with({})},
        {"bench", with({})},
    };
  }();
  return table;
}

Args parse_args(int argc, char** argv) {
  if (argc < 2)
    throw Usage(
        "usage: pointform <gen|embed|pretrain|tune|check|attn-dump|count|bench>"
        " [--config FILE] [--preset desk|paper] [--seed N] [--out DIR]"
        " [--steps N] [--suite NAME] [--format json|text]");
  Args args;
  args.command = argv[1];
  auto it = command_flags().find(args.command);
  if (it == command_flags().end())
    throw Usage(pf::cat("pointform: unknown command '", args.command, "'"));
  for (int i = 2; i < argc; ++i) {
    std::string token = argv[i];
    if (token.rfind("--", 0) != 0)
      throw Usage(pf::cat("pointform ", args.command, ": expected a flag, got '",
                          token, "'"));
    std::string name = token.substr(2);
    if (!it->second.count(name))
      throw Usage(pf::cat("pointform ", args.command, ": unknown flag --", name));
    if (i + 1 >= argc)
      throw Usage(pf::cat("pointform ", args.command, ": --", name,
                          " needs a value"));
    args.flags[name] = argv[++i];
  }
  auto format = args.get("format", "json");
  if (format != "json" && format != "text")
    throw Usage(pf::cat("pointform: --format wants json or text, got '", format,
                        "'"));
  return args;
}

pf::RunConfig config_for(const Args& args) {
  if (args.has("config") && args.has("preset"))
    throw Usage("pointform: pass --config or --preset, not both");
  pf::RunConfig rc = args.has("config")
                         ? pf::load_config(args.get("config"))
                         : pf::make_preset(args.get("preset", "desk"));
  if (args.has("seed"))
    pf::reseed(rc, pf::detail::parse_number<std::uint64_t>(args.get("seed"),
                                                           "--seed"));
  if (args.has("out")) rc.out_dir = args.get("out");
  rc.validate();
  return rc;
}

void render_text(const ordered_json& v, const std::string& prefix,
                 std::ostream& os) {
  if (v.is_object()) {
    for (const auto& [key, val] : v.items())
      render_text(val, prefix.empty() ? key : prefix + "." + key, os);
  } else if (v.is_array()) {
    for (std::size_t i = 0; i < v.size(); ++i)
      render_text(v[i], pf::cat(prefix, "[", i, "]"), os);
  } else {
    os << prefix << " = " << (v.is_string() ? v.get<std::string>() : v.dump())
       << "\n";
  }
}

void emit(const ordered_json& report, const Args& args) {
  if (args.get("format", "json") == "json")
    std::cout << report.dump(2) << "\n";
  else
    render_text(report, "", std::cout);
}

std::string out_dir_or_die(const pf::RunConfig& rc, const char* command) {
  if (rc.out_dir.empty())
    throw Usage(pf::cat("pointform ", command,
                        ": needs --out (or run.out in the config)"));
  return rc.out_dir;
}

ordered_json matrix_json(const double* data, std::size_t rows,
                         std::size_t cols) {
  ordered_json m = ordered_json::array();
  for (std::size_t r = 0; r < rows; ++r) {
    ordered_json row = ordered_json::array();
    for (std::size_t c = 0; c < cols; ++c) row.push_back(data[r * cols + c]);
    m.push_back(std::move(row));
  }
  return m;
}

// generated clouds resample to the embedding width before use
pf::Cloud<double> sized_cloud(pf::Cloud<double> cloud, const pf::RunConfig& rc) {
  if (cloud.size() == rc.embed.input_points) return cloud;
  return pf::resample(cloud, rc.embed.input_points,
                      pf::Rng(rc.seed).fork("resample"));
}

// ---- gen ----

int cmd_gen(const pf::RunConfig& rc, const Args& args) {
  auto out = out_dir_or_die(rc, "gen");
  pf::write_resolved_config(rc, out);
  auto data = pf::build_dataset<double>(rc.data);

  std::ofstream captions(out + "/captions.jsonl", std::ios::trunc);
  if (!captions)
    throw pf::IoError(pf::cat("gen: cannot write captions under ", out));
  for (std::size_t i = 0; i < data.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "sample-%05zu.pfpc", i);
    pf::save_cloud_binary(out + "/" + name, data[i].cloud);
    ordered_json line{{"index", i}, {"cloud", name}, {"caption", data[i].caption}};
    ordered_json qa = ordered_json::array();
    for (const auto& q : data[i].qa)
      qa.push_back({{"kind", q.kind}, {"q", q.question}, {"a", q.answer}});
    line["qa"] = std::move(qa);
    captions << line.dump() << "\n";
  }

  ordered_json report{{"schema", kSchema},
                      {"command", "gen"},
                      {"out", out},
                      {"count", data.size()},
                      {"points", rc.data.n_points},
                      {"seed", rc.seed},
                      {"captions", "captions.jsonl"}};
  emit(report, args);
  return 0;
}

// ---- embed ----

int cmd_embed(const pf::RunConfig& rc, const Args& args) {
  if (!args.has("cloud"))
    throw Usage("pointform embed: needs --cloud FILE (xyz text or pfpc binary)");
  auto cloud = sized_cloud(pf::load_cloud<double>(args.get("cloud")), rc);

  // the full model seeds the embedding exactly as a training run would
  Store store;
  pf::Model<double> model;
  pf::Rng rng(rc.seed);
  model.init(rc.model, rc.embed, rc.plan, store, rng);
  auto ts = model.embed.forward(cloud);

  ordered_json dump{{"schema", kSchema},
                    {"command", "embed"},
                    {"cloud", args.get("cloud")},
                    {"tokens_shape", {ts.tokens->shape[0], ts.tokens->shape[1]}},
                    {"patch_k", ts.patch_k}};
  dump["centers"] = matrix_json(ts.centers.data(), std::size_t(ts.centers.rows()),
                                3);
  dump["tokens"] = matrix_json(ts.tokens->value.data(), ts.tokens->shape[0],
                               ts.tokens->shape[1]);

  if (!rc.out_dir.empty()) {
    pf::write_resolved_config(rc, rc.out_dir);
    std::ofstream os(rc.out_dir + "/embed.json", std::ios::trunc);
    if (!os)
      throw pf::IoError(pf::cat("embed: cannot write under ", rc.out_dir));
    os << dump.dump(2) << "\n";
    ordered_json report{{"schema", kSchema},
                        {"command", "embed"},
                        {"cloud", args.get("cloud")},
                        {"tokens", ts.tokens->shape[0]},
                        {"dim", ts.tokens->shape[1]},
                        {"artifact", rc.out_dir + "/embed.json"}};
    emit(report, args);
  } else {
    emit(dump, args);
  }
  return 0;
}

// ---- pretrain / tune ----

std::vector<pf::MatRM<double>> teacher_bank_for(
    const pf::RunConfig& rc, const std::vector<pf::Sample<double>>& data) {
  pf::check(!rc.teacher_path.empty(),
            "train: distillation needs paths.teacher in the config");
  auto all = pf::load_teacher<double>(rc.teacher_path);
  const auto m = Eigen::Index(rc.embed.stage_sizes[2]);
  pf::check(all.rows() == Eigen::Index(data.size()) * m,
            pf::cat("train: teacher file has ", all.rows(), " rows, want ",
                    data.size() * rc.embed.stage_sizes[2], " (samples*tokens)"));
  std::vector<pf::MatRM<double>> bank(data.size());
  for (std::size_t i = 0; i < data.size(); ++i)
    bank[i] = all.middleRows(Eigen::Index(i) * m, m);
  return bank;
}

int cmd_train(pf::RunConfig rc, const Args& args, pf::Stage stage) {
  const char* word = stage == pf::Stage::Pretrain ? "pretrain" : "tune";
  auto& tc = stage == pf::Stage::Pretrain ? rc.pretrain : rc.tune;
  tc.steps = args.number("steps", tc.steps);
  tc.out_dir = out_dir_or_die(rc, word);
  rc.validate();
  pf::write_resolved_config(rc, rc.out_dir);

  auto data = pf::build_dataset<double>(rc.data);

  // the grid plan belongs to the tuning stage; pretraining runs the plain
  // stack so the hybrid learn slots never enter a grid
  Store store;
  pf::Model<double> model;
  pf::Rng rng(rc.seed);
  model.init(rc.model, rc.embed,
             stage == pf::Stage::Pretrain ? pf::HgaPlan{} : rc.plan, store, rng);
  if (args.has("init")) pf::load_pretrained_params(args.get("init"), store);

  std::vector<pf::MatRM<double>> bank;
  const std::vector<pf::MatRM<double>>* bank_ptr = nullptr;
  if (stage == pf::Stage::Pretrain && tc.ssl == pf::SslChoice::Kd) {
    bank = teacher_bank_for(rc, data);
    bank_ptr = &bank;
  }

  auto t0 = std::chrono::steady_clock::now();
  auto result = pf::train_loop(model, store, data, pf::Tokenizer{}, tc, bank_ptr);
  double seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();

  ordered_json report{{"schema", kSchema},
                      {"command", word},
                      {"steps", tc.steps},
                      {"batch_size", tc.batch_size},
                      {"seed", tc.seed},
                      {"first_total", result.total_history.front()},
                      {"final_total", result.total_history.back()},
                      {"seconds", seconds},
                      {"metrics", tc.out_dir + "/metrics.jsonl"},
                      {"checkpoint", result.checkpoint_path}};
  emit(report, args);
  return 0;
}

// ---- check ----

int cmd_check(const Args& args) {
  auto suite = args.get("suite", "all");
  auto results = pf::run_checks(suite);
  std::size_t failed = 0;
  ordered_json rows = ordered_json::array();
  for (const auto& r : results) {
    ordered_json row{{"id", r.id}, {"pass", r.pass}, {"seconds", r.seconds}};
    if (!r.pass) row["detail"] = r.detail;
    rows.push_back(std::move(row));
    failed += r.pass ? 0 : 1;
  }
  ordered_json report{{"schema", kSchema},
                      {"command", "check"},
                      {"suite", suite},
                      {"total", results.size()},
                      {"failed", failed},
                      {"results", std::move(rows)}};
  if (args.get("format", "json") == "text") {
    for (const auto& r : results) {
      std::cout << (r.pass ? "PASS " : "FAIL ") << r.id;
      if (!r.pass) std::cout << "  " << r.detail;
      std::cout << "\n";
    }
    std::cout << results.size() << " checks, " << failed << " failed\n";
  } else {
    emit(report, args);
  }
  return failed == 0 ? 0 : 1;
}

// ---- attn-dump ----

int cmd_attn_dump(const pf::RunConfig& rc, const Args& args) {
  auto layer = args.number("layer", 1);
  pf::check(layer >= 1 && layer <= rc.model.layers,
            pf::cat("attn-dump: --layer wants 1..", rc.model.layers, ", got ",
                    layer));

  pf::Cloud<double> cloud;
  std::vector<int> text;
  std::string source;
  if (args.has("cloud")) {
    source = args.get("cloud");
    cloud = sized_cloud(pf::load_cloud<double>(source), rc);
    text = {pf::Tokenizer::kBos, pf::Tokenizer::kEos};
  } else {
    source = "generated sample 0";
    auto sample = pf::make_sample<double>(rc.data, rc.data.seed, 0);
    cloud = sized_cloud(sample.cloud, rc);
    text = pf::detail::wrap_text(pf::Tokenizer{}, sample.caption);
  }

  Store store;
  pf::Model<double> model;
  pf::Rng rng(rc.seed);
  model.init(rc.model, rc.embed, rc.plan, store, rng);

  auto ts = model.embed.forward(cloud);
  std::vector<pf::Seq<double>> batch(1);
  batch[0].point_feats = ts.tokens;
  batch[0].point_coords = ts.centers;
  batch[0].text = text;

  pf::AttnProbe<double> probe;
  probe.layer = layer;
  model.forward(batch, &probe);

  const std::size_t T = probe.point_len[0] + probe.text_len[0];
  ordered_json dump{{"schema", kSchema},
                    {"command", "attn-dump"},
                    {"source", source},
                    {"layer", layer},
                    {"heads", rc.model.heads},
                    {"point_tokens", probe.point_len[0]},
                    {"text_tokens", probe.text_len[0]}};
  dump["weights"] = matrix_json(probe.weights[0].data(), rc.model.heads * T, T);
  dump["coords"] = matrix_json(probe.coords[0].data(),
                               std::size_t(probe.coords[0].rows()), 3);

  if (!rc.out_dir.empty()) {
    pf::write_resolved_config(rc, rc.out_dir);
    auto path = pf::cat(rc.out_dir, "/attn-layer", layer, ".json");
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw pf::IoError(pf::cat("attn-dump: cannot write ", path));
    os << dump.dump(2) << "\n";
    ordered_json report{{"schema", kSchema},     {"command", "attn-dump"},
                        {"source", source},      {"layer", layer},
                        {"rows", rc.model.heads * T}, {"artifact", path}};
    emit(report, args);
  } else {
    emit(dump, args);
  }
  return 0;
}

// ---- count ----

// without running the big preset, each aggregation halves the point tokens
// (three levels together give the roughly 1/8 the paper quotes) and each
// propagation restores its partner's count
std::vector<std::size_t> scaled_counts(const pf::HgaPlan& plan,
                                       std::size_t layers, std::size_t tokens) {
  std::map<std::size_t, int> events;  // layer -> +1 aggregate / -1 propagate
  for (const auto& b : plan.blocks) {
    for (auto a : b.aggregate_after) events[a] = 1;
    for (auto p : b.propagate_after) events[p] = -1;
  }
  std::vector<std::size_t> counts{tokens};
  std::vector<std::size_t> stack;
  std::size_t current = tokens;
  for (std::size_t l = 1; l <= layers; ++l) {
    auto it = events.find(l);
    if (it == events.end()) continue;
    if (it->second > 0) {
      stack.push_back(current);
      current = std::max<std::size_t>(1, current / 2);
    } else {
      current = stack.back();
      stack.pop_back();
    }
    counts.push_back(current);
  }
  return counts;
}

int cmd_count(const pf::RunConfig& rc, const Args& args) {
  auto pb = pf::count_params(rc.model, rc.embed, rc.plan);

  const std::size_t tokens = rc.embed.stage_sizes[2];
  std::string trace_source;
  std::vector<std::size_t> counts;
  if (pb.total() < 50'000'000) {
    // small enough to instantiate: measure the real token counts
    Store store;
    pf::Model<double> model;
    pf::Rng rng(rc.seed);
    model.init(rc.model, rc.embed, rc.plan, store, rng);
    auto cloud = sized_cloud(
        pf::make_sample<double>(rc.data, rc.data.seed, 0).cloud, rc);
    auto ts = model.embed.forward(cloud);
    std::vector<pf::Seq<double>> batch(1);
    batch[0].point_feats = ts.tokens;
    batch[0].point_coords = ts.centers;
    counts = model.forward(batch).token_counts;
    trace_source = "measured";
  } else {
    counts = scaled_counts(rc.plan, rc.model.layers, tokens);
    trace_source = "halving model";
  }
  auto trace = pf::layer_trace(rc.plan, rc.model.layers, counts);
  auto plain = pf::plain_trace(rc.model.layers, tokens);

  const std::size_t text_len = rc.model.max_text;
  auto fb = pf::flops_forward(rc.model, rc.embed, trace, text_len);
  auto fp = pf::flops_forward(rc.model, rc.embed, plain, text_len);

  ordered_json report{
      {"schema", kSchema},
      {"command", "count"},
      {"preset", rc.preset},
      {"params",
       {{"embed_trunk", pb.embed_trunk},
        {"embed_proj", pb.embed_proj},
        {"text_tables", pb.text_tables},
        {"blocks", pb.blocks},
        {"heads", pb.heads},
        {"grid_attention", pb.grid_attention},
        {"total", pb.total()},
        {"embed_share",
         double(pb.embed_trunk + pb.embed_proj) / double(pb.total())}}},
      {"flops",
       {{"embed", fb.embed},
        {"position", fb.position},
        {"attention_proj", fb.attention_proj},
        {"attention_mix", fb.attention_mix},
        {"ffn", fb.ffn},
        {"grid", fb.grid},
        {"lm_head", fb.lm_head},
        {"total", fb.total()}}},
      {"flops_plain_stack", fp.total()},
      {"flops_saving",
       fp.total() > 0 ? 1.0 - fb.total() / fp.total() : 0.0},
      {"trace", {{"source", trace_source}, {"token_counts", counts}}},
      {"text_len", text_len}};
  emit(report, args);
  return 0;
}

// ---- bench ----

int cmd_bench(const pf::RunConfig& rc, const Args& args) {
  setenv("PF_THREADS", "1", 1);  // kernel timings stay single-threaded

  ordered_json kernels = ordered_json::array();
  auto time_kernel = [&kernels](const std::string& name, auto&& fn,
                                int runs = 5) {
    fn();  // warm up
    double best = 1e30, sum = 0;
    for (int r = 0; r < runs; ++r) {
      auto t0 = std::chrono::steady_clock::now();
      fn();
      double s =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
              .count();
      best = std::min(best, s);
      sum += s;
    }
    kernels.push_back({{"name", name},
                       {"runs", runs},
                       {"best_s", best},
                       {"mean_s", sum / runs}});
  };

  pf::Rng rng(rc.seed);
  auto pts_of = [&rng](std::size_t n) {
    pf::Points<double> p(Eigen::Index(n), 3);
    for (Eigen::Index i = 0; i < p.rows(); ++i)
      for (int a = 0; a < 3; ++a) p(i, a) = rng.gaussian();
    return p;
  };

  auto big = pts_of(2048);
  time_kernel("fps-2048-to-512", [&] { pf::fps(big, 512); });

  auto centers = pts_of(512);
  time_kernel("knn-2048x512x16",
              [&] { pf::knn_group(big, centers, 16); });

  auto a = pts_of(512), b = pts_of(512);
  time_kernel("chamfer-512", [&] { pf::chamfer_l2(a, b); });

  auto grid_pts = pts_of(4096);
  time_kernel("grid-4096", [&] { pf::dynamic_grid_sample(grid_pts, 0.07); });

  auto ma = pf::param<double>({256, 256}, rng, 0.02);
  auto mb = pf::param<double>({256, 256}, rng, 0.02);
  time_kernel("matmul-256-fwd-bwd",
              [&] { pf::backward(pf::reduce_sum(pf::matmul(ma, mb))); });

  Store store;
  pf::Model<double> model;
  pf::Rng mrng(rc.seed);
  model.init(rc.model, rc.embed, pf::HgaPlan{}, store, mrng);
  pf::Cloud<double> cloud;
  cloud.pos = pts_of(rc.embed.input_points);
  time_kernel("embed-forward", [&] { model.embed.forward(cloud); }, 3);

  auto ts = model.embed.forward(cloud);
  std::vector<pf::Seq<double>> batch(1);
  batch[0].point_feats = ts.tokens;
  batch[0].point_coords = ts.centers;
  batch[0].text = {pf::Tokenizer::kBos, 5, 6, 7, pf::Tokenizer::kEos};
  time_kernel("model-forward", [&] { model.forward(batch); }, 3);

  std::vector<pf::HybridSample<double>> hb(1);
  hb[0].tokens = ts;
  hb[0].text = batch[0].text;
  pf::HybridConfig hc;
  time_kernel(
      "hybrid-loss-fwd-bwd",
      [&] {
        auto out = pf::hybrid_semantic_loss(model, hb, hc, pf::Rng(3));
        pf::backward(out.report.total);
      },
      3);

  ordered_json report{{"schema", kSchema},
                      {"command", "bench"},
                      {"threads", 1},
                      {"kernels", std::move(kernels)}};
  emit(report, args);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    Args args = parse_args(argc, argv);
    if (args.command == "check") return cmd_check(args);
    pf::RunConfig rc = config_for(args);
    if (args.command == "gen") return cmd_gen(rc, args);
    if (args.command == "embed") return cmd_embed(rc, args);
    if (args.command == "pretrain")
      return cmd_train(rc, args, pf::Stage::Pretrain);
    if (args.command == "tune") return cmd_train(rc, args, pf::Stage::Tune);
    if (args.command == "attn-dump") return cmd_attn_dump(rc, args);
    if (args.command == "count") return cmd_count(rc, args);
    if (args.command == "bench") return cmd_bench(rc, args);
    throw Usage(pf::cat("pointform: unknown command '", args.command, "'"));
  } catch (const Usage& u) {
    std::cerr << u.what() << "\n";
    return 2;
  } catch (const pf::ValueError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const pf::IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
