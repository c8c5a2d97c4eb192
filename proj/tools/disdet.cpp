// disdet: data generation, training, evaluation, ablation and feature dumps.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "disdet/ablation.hpp"
#include "disdet/evalmetrics.hpp"
#include "disdet/synthdata.hpp"
#include "disdet/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

/// Failures print exactly one line: error=<kind> command=<name> message="...".
int fail(int code, const std::string& command, const std::string& message) {
  std::string flat = message;
  for (auto& ch : flat) {
    if (ch == '\n' || ch == '\r') ch = ' ';
  }
  std::cerr << "error=" << (code == kExitUsage ? "usage" : "runtime") << " command=" << command
            << " message=" << json(flat).dump() << '\n';
  return code;
}

json read_json_file(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error("cannot open " + file.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(file.string() + " is not valid JSON: " + e.what());
  }
}

/// Training flags that override the config file when given.
struct TrainOverrides {
  std::optional<int64_t> iterations, iterations_phase2, checkpoint_every;
  std::optional<double> lr;
  std::optional<bool> sequential;
};

disdet::TrainConfig resolve_config(const std::string& config_path,
                                   const std::optional<uint64_t>& seed, const TrainOverrides& o) {
  disdet::TrainConfig cfg =
      config_path.empty() ? disdet::TrainConfig{} : disdet::load_train_config(config_path);
  if (seed) cfg.seed = *seed;
  if (o.iterations) cfg.iterations = *o.iterations;
  if (o.iterations_phase2) cfg.iterations_phase2 = *o.iterations_phase2;
  if (o.checkpoint_every) cfg.checkpoint_every = *o.checkpoint_every;
  if (o.lr) cfg.lr = *o.lr;
  if (o.sequential) cfg.sequential_stages = *o.sequential;
  // Round-trip through JSON so overrides pass the same validation as files.
  return json(cfg).get<disdet::TrainConfig>();
}

void add_train_overrides(CLI::App* cmd, TrainOverrides& o) {
  cmd->add_option("--iterations", o.iterations, "Iterations at the first learning rate");
  cmd->add_option("--iterations-phase2", o.iterations_phase2, "Iterations at the second learning rate");
  cmd->add_option("--checkpoint-every", o.checkpoint_every, "Checkpoint cadence in iterations");
  cmd->add_option("--lr", o.lr, "First-phase learning rate");
  cmd->add_option("--sequential-stages", o.sequential, "Run stages as consecutive phases");
}

disdet::ApProtocol parse_protocol(const std::string& s) {
  return s == "11pt" ? disdet::ApProtocol::kElevenPoint : disdet::ApProtocol::kAllPoint;
}

}  // namespace

int main(int argc, char** argv) {
  disdet::configure_determinism();

  CLI::App app{"Disentangled domain-adaptive detector on synthetic shapes"};
  app.require_subcommand(1);
  app.allow_extras(false);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate a Shapes2D split");
  std::string gen_spec, gen_style = "source", gen_out, gen_config, gen_split = "train";
  int64_t gen_count = 0;
  unsigned gen_threads = 1;
  std::optional<uint64_t> gen_seed;
  gen->add_option("--spec", gen_spec, "Scene spec JSON");
  gen->add_option("--config", gen_config, "Alias of --spec");
  gen->add_option("--style", gen_style, "Domain style")->check(CLI::IsMember({"source", "target"}));
  gen->add_option("--count", gen_count, "Number of images")->required()->check(CLI::PositiveNumber);
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--seed", gen_seed, "Generator seed");
  gen->add_option("--split", gen_split, "Image id prefix");
  gen->add_option("--threads", gen_threads, "Worker threads")->check(CLI::PositiveNumber);

  // train
  auto* tr = app.add_subcommand("train", "Train a detector");
  std::string tr_config, tr_source, tr_target, tr_out, tr_resume;
  std::optional<uint64_t> tr_seed;
  TrainOverrides tr_over;
  tr->add_option("--config", tr_config, "Training config JSON");
  tr->add_option("--source", tr_source, "Labelled source split")->required();
  tr->add_option("--target", tr_target, "Unlabelled target split")->required();
  tr->add_option("--out", tr_out, "Run directory")->required();
  tr->add_option("--resume", tr_resume, "Checkpoint to resume from");
  tr->add_option("--seed", tr_seed, "Training seed");
  add_train_overrides(tr, tr_over);

  // eval
  auto* ev = app.add_subcommand("eval", "Score a checkpoint");
  std::string ev_ckpt, ev_data, ev_protocol = "all", ev_out, ev_config;
  std::optional<uint64_t> ev_seed;
  ev->add_option("--checkpoint", ev_ckpt, "Checkpoint file")->required();
  ev->add_option("--data", ev_data, "Evaluation split")->required();
  ev->add_option("--ap-protocol", ev_protocol, "AP interpolation")->check(CLI::IsMember({"all", "11pt"}));
  ev->add_option("--out", ev_out, "Directory for metrics.csv and detections.jsonl");
  ev->add_option("--seed", ev_seed, "Accepted for uniformity; inference is deterministic");
  ev->add_option("--config", ev_config, "Accepted for uniformity; the checkpoint carries its config");

  // ablate
  auto* ab = app.add_subcommand("ablate", "Train and score ablation variants");
  std::string ab_config, ab_source, ab_target, ab_eval, ab_out;
  std::vector<std::string> ab_variants;
  std::vector<uint64_t> ab_seeds;
  std::optional<uint64_t> ab_seed;
  TrainOverrides ab_over;
  ab->add_option("--config", ab_config, "Base training config JSON");
  ab->add_option("--source", ab_source, "Labelled source split")->required();
  ab->add_option("--target", ab_target, "Unlabelled target split")->required();
  ab->add_option("--eval", ab_eval, "Target evaluation split")->required();
  ab->add_option("--out", ab_out, "Output directory")->required();
  ab->add_option("--variants", ab_variants, "Variant names")->required()->delimiter(',');
  ab->add_option("--seeds", ab_seeds, "Seed list")->delimiter(',');
  ab->add_option("--seed", ab_seed, "Single seed (ignored when --seeds is given)");
  add_train_overrides(ab, ab_over);

  // dump-features
  auto* df = app.add_subcommand("dump-features", "Write channel-max feature images");
  std::string df_ckpt, df_image, df_out, df_config;
  std::optional<uint64_t> df_seed;
  df->add_option("--checkpoint", df_ckpt, "Checkpoint file")->required();
  df->add_option("--image", df_image, "Input PNG")->required();
  df->add_option("--out", df_out, "Output directory")->required();
  df->add_option("--seed", df_seed, "Accepted for uniformity");
  df->add_option("--config", df_config, "Accepted for uniformity");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    std::cout << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    std::cout << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    std::cerr << app.help();
    return fail(kExitUsage, "parse", e.what());
  }

  std::string command = app.get_subcommands().front()->get_name();
  try {
    if (*gen) {
      disdet::SceneSpec spec;
      const std::string spec_file = gen_spec.empty() ? gen_config : gen_spec;
      if (!spec_file.empty()) spec = read_json_file(spec_file).get<disdet::SceneSpec>();
      if (gen_seed) spec.seed = *gen_seed;
      disdet::generate(spec, disdet::DomainStyle::named(gen_style), gen_count, gen_out,
                       {gen_split, gen_threads});
      std::cout << "wrote " << gen_count << " " << gen_style << " images to " << gen_out << '\n';
    } else if (*tr) {
      auto cfg = resolve_config(tr_config, tr_seed, tr_over);
      disdet::TrainPaths paths{tr_source, tr_target, tr_out, std::nullopt};
      if (!tr_resume.empty()) paths.resume = fs::path(tr_resume);
      const int64_t total = cfg.total_iterations();
      auto progress = [&](int64_t it, const std::vector<disdet::LossReport>& reports) {
        if ((it + 1) % 100 != 0 && it + 1 != total) return;
        std::cout << "iter " << (it + 1) << '/' << total;
        for (const auto& r : reports) std::cout << "  " << r.stage << '=' << r.total();
        std::cout << '\n';
      };
      auto result = disdet::train(cfg, paths, progress);
      std::cout << "final checkpoint " << result.final_checkpoint.string() << '\n';
    } else if (*ev) {
      disdet::EvalOutputs outputs;
      if (!ev_out.empty()) {
        fs::create_directories(ev_out);
        outputs.metrics_csv = fs::path(ev_out) / "metrics.csv";
        outputs.detections_jsonl = fs::path(ev_out) / "detections.jsonl";
      }
      auto result = disdet::evaluate(ev_ckpt, ev_data, outputs, parse_protocol(ev_protocol));
      std::cout << disdet::format_ap_table(result);
    } else if (*ab) {
      auto base = resolve_config(ab_config, ab_seed, ab_over);
      if (ab_seeds.empty()) ab_seeds.push_back(base.seed);
      for (const auto& v : ab_variants) disdet::apply_variant(base, v);
      auto source = disdet::Dataset::load(ab_source, disdet::Dataset::Boxes::kTraining);
      auto target = disdet::Dataset::load(ab_target, disdet::Dataset::Boxes::kTraining);
      auto eval = disdet::Dataset::load(ab_eval, disdet::Dataset::Boxes::kEvaluation);
      auto rows = disdet::ablate(base, ab_variants, ab_seeds, {&source, &target, &eval}, ab_out, true);
      const auto table = disdet::format_ablation_table(rows);
      std::cout << table;
      std::ofstream(fs::path(ab_out) / "ablation.txt") << table;
      disdet::write_ablation_csv(fs::path(ab_out) / "ablation.csv", rows);
    } else if (*df) {
      disdet::dump_features(df_ckpt, df_image, df_out);
      std::cout << "wrote base.png dir.png dsr.png to " << df_out << '\n';
    }
  } catch (const std::invalid_argument& e) {
    return fail(kExitUsage, command, e.what());
  } catch (const std::exception& e) {
    return fail(kExitRuntime, command, e.what());
  }
  return kExitOk;
}
