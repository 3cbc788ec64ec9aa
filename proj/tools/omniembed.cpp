// omniembed command-line tool. Flag parsing and file plumbing only; the
// work happens in omniembed/pipeline.hpp.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "omniembed/pipeline.hpp"

namespace fs = std::filesystem;
using namespace omniembed;

namespace {

struct Globals {
  std::optional<std::uint64_t> seed;
  std::size_t workers = 1;
};

[[noreturn]] void usage_error(const std::string& message, const std::string& path = {}) {
  throw Error(ErrorCode::config, message, path);
}

void require_file(const std::string& path) {
  if (!fs::exists(path)) throw Error(ErrorCode::io, "no such file: '" + path + "'", path);
}

std::vector<double> parse_doubles(const std::string& s, const std::string& flag) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(tok, &used));
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      usage_error("'" + tok + "' is not a number", flag);
    }
  }
  if (out.empty()) usage_error("empty list", flag);
  return out;
}

std::vector<std::size_t> parse_sizes(const std::string& s, const std::string& flag) {
  std::vector<std::size_t> out;
  for (double v : parse_doubles(s, flag)) {
    if (v < 1 || v != std::floor(v)) usage_error("expected positive integers", flag);
    out.push_back(static_cast<std::size_t>(v));
  }
  return out;
}

ModalitySet parse_view_flag(const std::string& s) {
  if (s == "all") return ModalitySet::all();
  ModalitySet out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    const auto m = parse_modality(tok);
    if (!m) usage_error("unknown modality '" + tok + "'", "--view");
    out.insert(*m);
  }
  if (out.empty()) usage_error("empty view", "--view");
  return out;
}

/// "name=path" or a bare path (named after its stem).
std::pair<std::string, std::string> named_file(const std::string& arg) {
  const auto eq = arg.find('=');
  if (eq == std::string::npos) return {fs::path(arg).stem().string(), arg};
  return {arg.substr(0, eq), arg.substr(eq + 1)};
}

void emit(const Json& report, const std::string& out) {
  if (out.empty() || out == "-") {
    std::cout << report.dump(2) << '\n';
  } else {
    write_json(out, report);
  }
}

PipelineConfig config_from(const std::string& path, bool read_weights_from = true) {
  require_file(path);
  return load_config(path, read_weights_from);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"omniembed: toy omni-modal contrastive embedding toolkit"};
  app.set_version_flag("--version", std::string(kToolName) + " " + kVersion + " (build " + kBuild + ")");
  app.require_subcommand(1);
  app.fallthrough();

  Globals g;
  app.add_option("--seed", g.seed, "Seed (overrides " + std::string(kSeedEnv) + " and the config)");
  app.add_option("--workers", g.workers, "Worker threads; 1 is the certified-deterministic mode")
      ->check(CLI::PositiveNumber);

  // gen-synth
  auto* gen = app.add_subcommand("gen-synth", "Generate a synthetic corpus");
  std::string gen_out, gen_config;
  std::optional<std::size_t> gen_clusters, gen_items;
  std::optional<double> gen_sigma, gen_hard;
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--config", gen_config, "Pipeline config (its 'synth' section and seed)");
  gen->add_option("--n-clusters", gen_clusters);
  gen->add_option("--items-per-cluster", gen_items);
  gen->add_option("--noise-sigma", gen_sigma);
  gen->add_option("--hard-fraction", gen_hard);

  // embed
  auto* emb = app.add_subcommand("embed", "Embed items with a checkpoint (or a freshly initialized encoder)");
  std::string emb_items, emb_out, emb_ckpt, emb_config, emb_view = "all", emb_ids, emb_side = "query";
  std::optional<std::size_t> emb_instr;
  emb->add_option("--items", emb_items, "Item JSONL")->required();
  emb->add_option("--out", emb_out, "Embedding file to write")->required();
  emb->add_option("--checkpoint", emb_ckpt, "Checkpoint directory");
  emb->add_option("--config", emb_config, "Config used to initialize an untrained encoder");
  emb->add_option("--view", emb_view, "Comma-separated modalities or 'all'");
  emb->add_option("--instruction", emb_instr, "Instruction id");
  emb->add_option("--ids", emb_ids, "Pairs JSONL restricting which items are embedded");
  emb->add_option("--side", emb_side, "Side of --ids to embed")->check(CLI::IsMember({"query", "target", "both"}));

  // mine
  auto* mn = app.add_subcommand("mine", "Threshold sweep and hard-negative selection");
  std::string mn_emb, mn_pairs, mn_out;
  std::size_t mn_m = kDefaultHardNegativesPerQuery, mn_cap = kDefaultNegativeCap;
  mn->add_option("--embeddings", mn_emb, "Embedding file holding queries and targets")->required();
  mn->add_option("--pairs", mn_pairs, "Positive pairs JSONL")->required();
  mn->add_option("--m", mn_m, "Hard negatives per query")->check(CLI::PositiveNumber);
  mn->add_option("--cap", mn_cap, "Maximum negatives scored")->check(CLI::PositiveNumber);
  mn->add_option("--out", mn_out, "Report path")->required();

  // balance
  auto* bal = app.add_subcommand("balance", "Sinkhorn similarity of training sets to benchmarks");
  std::vector<std::string> bal_train, bal_bench;
  std::string bal_out;
  BalanceParams bp;
  bal->add_option("--train", bal_train, "Training set embeddings, name=file")->required();
  bal->add_option("--bench", bal_bench, "Benchmark embeddings, name=file")->required();
  bal->add_option("--k", bp.k, "Clusters per set")->check(CLI::PositiveNumber);
  bal->add_option("--epsilon", bp.epsilon, "Entropic regularization")->check(CLI::PositiveNumber);
  bal->add_option("--iters", bp.sinkhorn_iters, "Sinkhorn iterations")->check(CLI::PositiveNumber);
  bal->add_option("--kmeans-iters", bp.max_iters)->check(CLI::PositiveNumber);
  bal->add_option("--temp", bp.temperature, "Softmax temperature")->check(CLI::PositiveNumber);
  bal->add_option("--sample-size", bp.sample_size)->check(CLI::PositiveNumber);
  bal->add_option("--out", bal_out, "Report path")->required();

  // train
  auto* tr = app.add_subcommand("train", "Run the configured stage plan");
  std::string tr_config, tr_out;
  tr->add_option("--config", tr_config, "Pipeline config")->required();
  tr->add_option("--out", tr_out, "Checkpoint directory")->required();

  // eval
  auto* ev = app.add_subcommand("eval", "Retrieval and embedding-quality metrics");
  std::string ev_q, ev_t, ev_gold, ev_metrics = "all", ev_out, ev_ks;
  EvalOptions eo;
  ev->add_option("--queries", ev_q, "Query embeddings")->required();
  ev->add_option("--targets", ev_t, "Target embeddings")->required();
  ev->add_option("--gold", ev_gold, "Gold pairs JSONL")->required();
  ev->add_option("--metrics", ev_metrics, "'all' or a comma-separated subset");
  ev->add_option("--ks", ev_ks, "Recall cutoffs, e.g. 1,10,100");
  ev->add_option("--nmi-k", eo.nmi_k)->check(CLI::PositiveNumber);
  ev->add_option("--rank-k", eo.rank_k)->check(CLI::PositiveNumber);
  ev->add_option("--rank-dim", eo.rank_dim, "Prefix dimension compared against the full ranking");
  ev->add_option("--neg-per-query", eo.neg_per_query)->check(CLI::PositiveNumber);
  ev->add_option("--out", ev_out, "Report path")->required();

  // schedule
  auto* sc = app.add_subcommand("schedule", "Draw dataset indices by weight");
  std::string sc_weights, sc_out;
  std::size_t sc_draws = 0;
  sc->add_option("--weights", sc_weights, "Comma-separated weights summing to 1")->required();
  sc->add_option("--draws", sc_draws, "Number of draws")->required();
  sc->add_option("--out", sc_out, "Report path (stdout when omitted)");

  // distill
  auto* di = app.add_subcommand("distill", "seq2item / id2item distillation");
  std::string di_config, di_ckpt, di_out, di_mode;
  di->add_option("--config", di_config, "Pipeline config")->required();
  di->add_option("--checkpoint", di_ckpt, "Starting checkpoint (fresh encoder when omitted)");
  di->add_option("--mode", di_mode, "Overrides distill.mode")->check(CLI::IsMember({"seq2item", "id2item"}));
  di->add_option("--out", di_out, "Output directory")->required();

  // check-grads
  auto* cg = app.add_subcommand("check-grads", "Finite-difference certification of every gradient");
  std::size_t cg_instances = 50, cg_dim = 8;
  std::string cg_out;
  cg->add_option("--instances", cg_instances)->check(CLI::PositiveNumber);
  cg->add_option("--dim", cg_dim)->check(CLI::Range(2, 64));
  cg->add_option("--out", cg_out, "Report path (stdout when omitted)");

  int status = 0;
  try {
    try {
      app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
      return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
      return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
      return app.exit(e);
    } catch (const CLI::ParseError& e) {
      throw Error(ErrorCode::config, e.what(), "argv");
    }

    if (gen->parsed()) {
      SynthSpec spec;
      std::optional<std::uint64_t> cfg_seed;
      if (!gen_config.empty()) {
        const auto cfg = config_from(gen_config, false);
        spec = cfg.synth;
        cfg_seed = cfg.seed;
      }
      if (gen_clusters) spec.n_clusters = *gen_clusters;
      if (gen_items) spec.items_per_cluster = *gen_items;
      if (gen_sigma) spec.noise_sigma = *gen_sigma;
      if (gen_hard) spec.hard_fraction = *gen_hard;
      const auto seed = resolve_seed(g.seed, cfg_seed);
      const Json config{{"synth", synth_to_json(spec)}};
      const auto result = gen_synth(spec, seed, gen_out);
      write_json(fs::path(gen_out) / "report.json", make_report("gen-synth", seed, config, result));
    } else if (emb->parsed()) {
      require_file(emb_items);
      if (emb_ckpt.empty() == emb_config.empty()) usage_error("exactly one of --checkpoint or --config is required", "--checkpoint");
      std::optional<ToyEncoder> enc;
      if (!emb_ckpt.empty()) {
        enc = load_checkpoint(emb_ckpt);
      } else {
        const auto cfg = config_from(emb_config, false);
        enc = init_encoder(cfg, resolve_seed(g.seed, cfg.seed));
      }
      const auto corpus = load_corpus(emb_items, enc->dims().raw);
      std::vector<std::string> ids;
      if (!emb_ids.empty()) {
        require_file(emb_ids);
        for (const auto& p : read_pairs(emb_ids)) {
          if (emb_side != "target") ids.push_back(p.query);
          if (emb_side != "query") ids.push_back(p.target);
        }
      }
      if (emb_instr && *emb_instr >= enc->dims().instructions)
        usage_error("instruction id exceeds the encoder's instruction count", "--instruction");
      write_embeddings(fs::path(emb_out), embed_items(*enc, corpus, ids, parse_view_flag(emb_view), emb_instr, emb_items));
    } else if (mn->parsed()) {
      require_file(mn_emb);
      require_file(mn_pairs);
      const auto seed = resolve_seed(g.seed, std::nullopt);
      const auto store = read_embeddings(fs::path(mn_emb));
      PositivePairs positives;
      for (const auto& p : read_pairs(mn_pairs)) positives.emplace_back(p.query, p.target);
      const Json config{{"embeddings", mn_emb}, {"pairs", mn_pairs}, {"m", mn_m}, {"cap", mn_cap}, {"workers", g.workers}};
      emit(make_report("mine", seed, config, mine(store, positives, mn_m, mn_cap, seed, g.workers)), mn_out);
    } else if (bal->parsed()) {
      bp.seed = resolve_seed(g.seed, std::nullopt);
      bp.workers = g.workers;
      std::vector<std::string> tn, bn;
      std::vector<EmbeddingStore> ts, bs;
      Json files = Json::object();
      for (const auto& arg : bal_train) {
        auto [name, path] = named_file(arg);
        require_file(path);
        if (std::find(tn.begin(), tn.end(), name) != tn.end()) usage_error("duplicate training set name '" + name + "'", "--train");
        tn.push_back(name);
        ts.push_back(read_embeddings(fs::path(path)));
        files["train"][name] = path;
      }
      for (const auto& arg : bal_bench) {
        auto [name, path] = named_file(arg);
        require_file(path);
        bn.push_back(name);
        bs.push_back(read_embeddings(fs::path(path)));
        files["bench"][name] = path;
      }
      const Json config{{"files", files},          {"k", bp.k},
                        {"epsilon", bp.epsilon},   {"iters", bp.sinkhorn_iters},
                        {"kmeans_iters", bp.max_iters}, {"temperature", bp.temperature},
                        {"sample_size", bp.sample_size}, {"workers", g.workers}};
      emit(make_report("balance", bp.seed, config, balance(tn, ts, bn, bs, bp)), bal_out);
    } else if (tr->parsed()) {
      auto cfg = config_from(tr_config);
      if (app.get_option("--workers")->count()) cfg.workers = g.workers;
      const auto seed = resolve_seed(g.seed, cfg.seed);
      const auto corpus = load_corpus(cfg.items, cfg.encoder.raw);
      auto enc = init_encoder(cfg, seed);
      auto result = run_training(cfg, seed, enc, corpus, fs::path(tr_out));
      write_json(fs::path(tr_out) / "report.json", make_report("train", seed, cfg.echo, std::move(result)));
    } else if (ev->parsed()) {
      require_file(ev_q);
      require_file(ev_t);
      require_file(ev_gold);
      eo.seed = resolve_seed(g.seed, std::nullopt);
      eo.workers = g.workers;
      if (!ev_ks.empty()) eo.ks = parse_sizes(ev_ks, "--ks");
      if (ev_metrics != "all") {
        eo.metrics.clear();
        std::stringstream ss(ev_metrics);
        std::string m;
        while (std::getline(ss, m, ',')) {
          if (!known_metrics().count(m)) usage_error("unknown metric '" + m + "'", "--metrics");
          eo.metrics.insert(m);
        }
      }
      const auto q = read_embeddings(fs::path(ev_q));
      const auto t = read_embeddings(fs::path(ev_t));
      const auto gold = gold_map(read_pairs(ev_gold), ev_gold);
      const Json config{{"queries", ev_q},         {"targets", ev_t},       {"gold", ev_gold},
                        {"metrics", eo.metrics},   {"ks", eo.ks},           {"nmi_k", eo.nmi_k},
                        {"rank_k", eo.rank_k},     {"rank_dim", eo.rank_dim}, {"neg_per_query", eo.neg_per_query},
                        {"workers", g.workers}};
      emit(make_report("eval", eo.seed, config, evaluate_stores(q, t, gold, eo)), ev_out);
    } else if (sc->parsed()) {
      const auto weights = parse_doubles(sc_weights, "--weights");
      try {
        validate_weights(weights);
      } catch (const Error& e) {
        usage_error(e.what(), "--weights");
      }
      const auto seed = resolve_seed(g.seed, std::nullopt);
      const Json config{{"weights", weights}, {"draws", sc_draws}};
      emit(make_report("schedule", seed, config, schedule(weights, sc_draws, seed)), sc_out);
    } else if (di->parsed()) {
      auto cfg = config_from(di_config);
      if (app.get_option("--workers")->count()) cfg.workers = g.workers;
      if (!di_mode.empty()) cfg.distill.mode = di_mode == "seq2item" ? DistillMode::seq2item : DistillMode::id2item;
      const auto seed = resolve_seed(g.seed, cfg.seed);
      const auto corpus = load_corpus(cfg.items, cfg.encoder.raw);
      auto enc = di_ckpt.empty() ? init_encoder(cfg, seed) : load_checkpoint(di_ckpt);
      auto result = run_distillation(cfg, seed, enc, corpus);
      save_checkpoint(fs::path(di_out) / "checkpoint", enc);
      result["checkpoint"] = "checkpoint";
      Json config = cfg.echo;
      config["distill_mode_override"] = di_mode.empty() ? Json(nullptr) : Json(di_mode);
      write_json(fs::path(di_out) / "report.json", make_report("distill", seed, config, std::move(result)));
    } else if (cg->parsed()) {
      const auto seed = resolve_seed(g.seed, std::nullopt);
      const Json config{{"instances", cg_instances}, {"dim", cg_dim}};
      const auto result = check_grads(cg_instances, cg_dim, seed);
      status = result.at("passed").get<bool>() ? 0 : 1;
      emit(make_report("check-grads", seed, config, result), cg_out);
    }
  } catch (const Error& e) {
    const Json err{{"error", {{"code", to_string(e.code())}, {"message", e.what()}, {"path", e.path()}}}};
    std::cerr << err.dump() << '\n';
    return e.code() == ErrorCode::config || e.code() == ErrorCode::io ? 2 : 1;
  } catch (const std::exception& e) {
    const Json err{{"error", {{"code", "internal"}, {"message", e.what()}, {"path", ""}}}};
    std::cerr << err.dump() << '\n';
    return 1;
  }
  return status;
}
