#include "disdet/ablation.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace disdet {

namespace fs = std::filesystem;

const std::vector<std::string>& ablation_variants() {
  static const std::vector<std::string> names{
      "source-only", "stage1-only", "stages1-2",  "stages1-3",           "relation",
      "no-relation", "one-layer",   "two-layers", "one-stage-all-losses"};
  return names;
}

TrainConfig apply_variant(const TrainConfig& base, const std::string& variant) {
  TrainConfig c = base;
  if (variant == "source-only") {
    c.weights.focal = 0.0;
    c.weights.mi = 0.0;
    c.weights.relation = 0.0;
    c.weights.reconstruction = 0.0;
  } else if (variant == "stage1-only") {
    c.stages = {"fd"};
  } else if (variant == "stages1-2") {
    c.stages = {"fd", "fs"};
  } else if (variant == "stages1-3" || variant == "relation" || variant == "two-layers") {
    c.stages = {"fd", "fs", "fr"};
  } else if (variant == "no-relation") {
    c.weights.relation = 0.0;
  } else if (variant == "one-layer") {
    c.net.one_layer = true;
  } else if (variant == "one-stage-all-losses") {
    c.one_stage = true;
  } else {
    throw std::invalid_argument("unknown ablation variant '" + variant + "'");
  }
  return c;
}

double AblationRow::mean() const {
  if (map_per_seed.empty()) return 0.0;
  return std::accumulate(map_per_seed.begin(), map_per_seed.end(), 0.0) /
         static_cast<double>(map_per_seed.size());
}

std::vector<AblationRow> ablate(const TrainConfig& base, const std::vector<std::string>& variants,
                                const std::vector<uint64_t>& seeds, const AblationData& data,
                                const fs::path& out_dir, bool verbose) {
  if (data.source == nullptr || data.target == nullptr || data.eval == nullptr) {
    throw std::invalid_argument("ablate needs source, target and evaluation data");
  }
  if (seeds.empty()) throw std::invalid_argument("ablate needs at least one seed");
  std::vector<AblationRow> rows;
  // Validate every name before spending time on training.
  for (const auto& v : variants) rows.push_back({v, apply_variant(base, v), {}});
  for (auto& row : rows) {
    for (auto seed : seeds) {
      TrainConfig cfg = row.config;
      cfg.seed = seed;
      const auto dir = out_dir / row.variant / ("seed" + std::to_string(seed));
      auto result = train(cfg, *data.source, *data.target, dir);
      auto model = load_model(result.final_checkpoint);
      auto ap = evaluate(model, *data.eval);
      row.map_per_seed.push_back(ap.map);
      if (verbose) {
        std::cerr << "ablate variant=" << row.variant << " seed=" << seed << " map=" << ap.map << '\n';
      }
    }
  }
  return rows;
}

namespace {

bool has_stage(const TrainConfig& c, const char* s) {
  return c.one_stage || std::find(c.stages.begin(), c.stages.end(), s) != c.stages.end();
}

const char* mark(bool on) { return on ? "x" : "."; }

}  // namespace

std::string format_ablation_table(const std::vector<AblationRow>& rows) {
  std::size_t width = 8;
  std::size_t seeds = 0;
  for (const auto& r : rows) {
    width = std::max(width, r.variant.size());
    seeds = std::max(seeds, r.map_per_seed.size());
  }
  std::ostringstream os;
  char buf[64];
  auto pad = [&](const std::string& s) { os << s << std::string(width + 2 - s.size(), ' '); };
  pad("variant");
  os << "1st 2nd 3rd  RC  layers";
  for (std::size_t s = 0; s < seeds; ++s) {
    std::snprintf(buf, sizeof(buf), "  seed%-3zu", s);
    os << buf;
  }
  os << "    mean\n";
  for (const auto& r : rows) {
    const auto& c = r.config;
    pad(r.variant);
    std::snprintf(buf, sizeof(buf), " %s   %s   %s   %s     %d  ", mark(has_stage(c, "fd")),
                  mark(has_stage(c, "fs") && !c.one_stage), mark(has_stage(c, "fr") && !c.one_stage),
                  mark(c.weights.relation != 0.0 && has_stage(c, "fs")), c.net.one_layer ? 1 : 2);
    os << buf;
    for (double m : r.map_per_seed) {
      std::snprintf(buf, sizeof(buf), "%9.2f", 100.0 * m);
      os << buf;
    }
    for (std::size_t s = r.map_per_seed.size(); s < seeds; ++s) os << "        -";
    std::snprintf(buf, sizeof(buf), "%8.2f\n", 100.0 * r.mean());
    os << buf;
  }
  return os.str();
}

void write_ablation_csv(const fs::path& file, const std::vector<AblationRow>& rows) {
  std::ofstream out(file);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  out << "variant,seed_index,map\n";
  for (const auto& r : rows) {
    for (std::size_t s = 0; s < r.map_per_seed.size(); ++s) {
      out << r.variant << ',' << s << ',' << r.map_per_seed[s] << '\n';
    }
    out << r.variant << ",mean," << r.mean() << '\n';
  }
}

}  // namespace disdet
