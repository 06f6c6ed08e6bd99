#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "neurolens/fixture.hpp"
#include "neurolens/pipeline.hpp"
#include "neurolens/svg.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace neurolens;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::string model;
  std::string output;
  std::string mode;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("-c,--config", c.config, "run config (JSON)");
  sub->add_option("--set", c.sets, "override a config field, e.g. --set attribution.top_n=10");
  sub->add_option("--model", c.model, "model manifest (overrides config)");
  sub->add_option("-o,--output", c.output, "output directory (overrides config)");
  sub->add_option("--mode", c.mode, "dataset mode: toxigen, creact-direct or creact-indirect");
}

std::string absolute(const std::string& p) { return fs::absolute(p).lexically_normal().string(); }

/// Config file plus flag overrides. Paths given as flags are relative to the working directory.
pipeline::RunConfig load_config(const Common& c, const std::vector<std::pair<std::string, std::string>>& path_flags = {}) {
  json j = json::object();
  fs::path base = fs::current_path();
  if (!c.config.empty()) {
    j = pipeline::read_json_file(c.config);
    base = fs::absolute(c.config).parent_path();
  }
  for (const auto& s : c.sets) pipeline::apply_override(j, s);
  if (!c.model.empty()) j["model"] = absolute(c.model);
  if (!c.output.empty()) j["output"] = absolute(c.output);
  if (!c.mode.empty()) j["mode"] = c.mode;
  for (const auto& [key, value] : path_flags) {
    if (!value.empty()) pipeline::apply_override(j, key + "=" + json(absolute(value)).dump());
  }
  return pipeline::parse_config(j, base);
}

std::string read_file(const std::string& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) fail(ErrorCode::IoError, "cannot read " + p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"neurolens: probes, neuron attribution and interventions for demographic bias"};
  app.require_subcommand(1);

  Common probe_c, lens_c, attr_c, act_c, int_c, rep_c;
  auto* probe = app.add_subcommand("probe", "train and evaluate a linear probe on one dataset");
  add_common(probe, probe_c);

  auto* lens = app.add_subcommand("lens", "project a neuron output or a probe direction onto the vocabulary");
  add_common(lens, lens_c);
  std::string lens_neuron, lens_probe, lens_class;
  std::size_t lens_k = 20;
  lens->add_option("--neuron", lens_neuron, "neuron as MLP.v^L_J (1-based layer) or layer:index");
  lens->add_option("--probe", lens_probe, "probe manifest");
  lens->add_option("--class", lens_class, "probe class whose direction to project");
  lens->add_option("-k", lens_k, "number of tokens")->check(CLI::PositiveNumber);

  auto* attribute = app.add_subcommand("attribute", "rank neurons against probe directions and filter by keywords");
  add_common(attribute, attr_c);
  std::string attr_probe, attr_keywords;
  attribute->add_option("--probe", attr_probe, "probe manifest (overrides probe.file)");
  attribute->add_option("--keywords", attr_keywords, "keyword table (overrides config)");

  auto* activations = app.add_subcommand("activations", "group-by-group activation matrix");
  add_common(activations, act_c);
  std::vector<std::string> act_groups;
  activations->add_option("--groups", act_groups, "neuron-group files (groups.json)");

  auto* intervene = app.add_subcommand("intervene", "baseline outcomes and the intervention sweep");
  add_common(intervene, int_c);
  std::string int_direct, int_indirect;
  intervene->add_option("--direct", int_direct, "direct neuron groups (groups.json)");
  intervene->add_option("--indirect", int_indirect, "indirect neuron groups (groups.json)");

  auto* report = app.add_subcommand("report", "full pipeline over every configured dataset");
  add_common(report, rep_c);

  auto* synth = app.add_subcommand("synth", "write the planted synthetic fixture");
  std::string synth_out = "fixture";
  synth->add_option("-o,--output", synth_out, "output directory");

  auto* plot = app.add_subcommand("plot", "render a matrix CSV as an SVG heatmap");
  std::string plot_csv, plot_svg, plot_title;
  plot->add_option("--csv", plot_csv, "input CSV")->required();
  plot->add_option("--svg", plot_svg, "output SVG")->required();
  plot->add_option("--title", plot_title, "title");

  CLI11_PARSE(app, argc, argv);

  try {
    json result;
    if (probe->parsed()) {
      result = pipeline::cmd_probe(load_config(probe_c));
    } else if (lens->parsed()) {
      if (lens_neuron.empty() == lens_probe.empty()) fail(ErrorCode::ConfigError, "lens needs exactly one of --neuron or --probe");
      auto cfg = load_config(lens_c);
      pipeline::validate(cfg, {});
      const auto m = pipeline::load_model_stage(cfg);
      Vec v;
      std::string what;
      if (!lens_neuron.empty()) {
        const auto ref = pipeline::parse_neuron(lens_neuron);
        if (ref.layer >= m.config.n_layers || ref.index >= m.config.d_mlp) fail(ErrorCode::ConfigError, "neuron " + lens_neuron + " is outside the model");
        const auto out = m.neuron_output(ref.layer, ref.index);
        v.assign(out.begin(), out.end());
        what = ref.notation();
      } else {
        const auto p = pipeline::stage("load-probe", [&] { return load_probe(lens_probe); });
        const auto g = group_from_string(lens_class);
        if (!g) fail(ErrorCode::ConfigError, "unknown class '" + lens_class + "'");
        v = probe_direction(p, *g);
        what = "probe:" + lens_class;
      }
      json toks = json::array();
      for (const auto& e : pipeline::stage("lens", [&] { return logit_lens(m, v, lens_k); }).entries) {
        toks.push_back({{"id", e.id}, {"token", e.token}, {"logit", e.logit}});
      }
      result = {{"source", what}, {"top_tokens", toks}};
    } else if (attribute->parsed()) {
      result = pipeline::cmd_attribute(load_config(attr_c, {{"probe.file", attr_probe}, {"keywords", attr_keywords}}));
    } else if (activations->parsed()) {
      auto c = act_c;
      json list = json::array();
      for (const auto& g : act_groups) list.push_back(absolute(g));
      if (!act_groups.empty()) c.sets.push_back("groups=" + list.dump());
      result = pipeline::cmd_activations(load_config(c));
    } else if (intervene->parsed()) {
      result = pipeline::cmd_intervene(
          load_config(int_c, {{"intervention.direct_groups", int_direct}, {"intervention.indirect_groups", int_indirect}}));
    } else if (report->parsed()) {
      result = pipeline::cmd_report(load_config(rep_c));
    } else if (synth->parsed()) {
      const auto f = pipeline::stage("synth", [&] { return fixture::write(synth_out); });
      json planted = json::object();
      for (const auto& [name, ref] : f.planted) planted[name] = ref.notation();
      result = {{"output", synth_out}, {"vocab_size", f.model.config.vocab_size}, {"planted", planted}};
    } else if (plot->parsed()) {
      const auto svg = pipeline::stage("plot", [&] { return heatmap_svg(read_file(plot_csv), plot_title); });
      std::ofstream os(plot_svg, std::ios::binary);
      if (!os) fail(ErrorCode::IoError, "cannot write " + plot_svg);
      os << svg;
      result = {{"svg", plot_svg}};
    }
    std::cout << result.dump(2) << "\n";
    return 0;
  } catch (const Error& e) {
    std::cerr << "neurolens: " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "neurolens: IoError: " << e.what() << "\n";
    return 3;
  }
}
