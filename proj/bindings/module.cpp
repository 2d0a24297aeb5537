#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <optional>
#include <sstream>

#include "smc/train.hpp"

namespace py = pybind11;

namespace {

std::vector<double> py_softmax(const std::vector<double>& logits) {
  smc::Tensor t = smc::Tensor::from_data(
      {static_cast<std::int64_t>(logits.size())}, std::vector<double>(logits));
  smc::Tensor out = smc::softmax(t);
  return {out.values().begin(), out.values().end()};
}

std::vector<double> py_swish(const std::vector<double>& xs) {
  smc::Tensor t = smc::Tensor::from_data({static_cast<std::int64_t>(xs.size())},
                                         std::vector<double>(xs));
  smc::Tensor out = smc::swish(t);
  return {out.values().begin(), out.values().end()};
}

double py_balance_loss(const std::vector<std::vector<double>>& gates,
                       const std::vector<std::int64_t>& chosen) {
  if (gates.empty()) throw smc::UsageError("balance loss needs at least one token");
  const auto t = static_cast<std::int64_t>(gates.size());
  const auto e = static_cast<std::int64_t>(gates[0].size());
  std::vector<double> flat;
  flat.reserve(static_cast<std::size_t>(t * e));
  for (const auto& row : gates) {
    if (static_cast<std::int64_t>(row.size()) != e) {
      throw smc::UsageError("ragged gate rows");
    }
    flat.insert(flat.end(), row.begin(), row.end());
  }
  smc::Tensor g = smc::Tensor::from_data({t, e}, std::move(flat));
  auto stats = smc::collect_router_stats(g, chosen, smc::Mask(t, 1));
  return smc::load_balance_loss(stats).item();
}

py::dict report_to_dict(const smc::ParamReport& rep) {
  py::dict d;
  d["frontend"] = rep.frontend;
  d["ffn"] = rep.ffn;
  d["mhsa"] = rep.mhsa;
  d["conv"] = rep.conv;
  d["experts"] = rep.experts;
  d["routers"] = rep.routers;
  d["norms"] = rep.norms;
  d["total"] = rep.total();
  return d;
}

py::dict py_count_params(int blocks_per_group, int groups, int experts, int d, int heads,
                         int kernel, int d_ff, int feature_dim, int frontend_channels,
                         bool share_norms, bool share_routers) {
  smc::EncoderConfig cfg;
  cfg.blocks_per_group = blocks_per_group;
  cfg.groups = groups;
  cfg.experts = experts;
  cfg.d = d;
  cfg.heads = heads;
  cfg.kernel = kernel;
  cfg.d_ff = d_ff;
  cfg.feature_dim = feature_dim;
  cfg.frontend_channels = frontend_channels;
  cfg.share_norms = share_norms;
  cfg.share_routers = share_routers;
  return report_to_dict(smc::count_params(cfg));
}

py::dict py_count_params_file(const std::string& config_path) {
  smc::ExperimentConfig cfg = smc::load_config(config_path);
  return report_to_dict(smc::count_params(cfg.model.encoder));
}

smc::ExperimentConfig load_with_seed(const std::string& path,
                                     std::optional<std::uint64_t> seed) {
  smc::ExperimentConfig cfg = smc::load_config(path);
  if (seed.has_value()) cfg.train.seed = *seed;
  return cfg;
}

py::dict py_synth_data(const std::string& config_path, std::optional<std::uint64_t> seed) {
  smc::ExperimentConfig cfg = load_with_seed(config_path, seed);
  smc::Dataset data = smc::synth_dataset(cfg.synth, cfg.synth.n_utts, cfg.train.seed);
  smc::write_features(cfg.synth.out_features, data);
  smc::write_transcripts(cfg.synth.out_transcripts, data);
  py::dict d;
  d["utterances"] = data.size();
  d["features"] = cfg.synth.out_features;
  d["transcripts"] = cfg.synth.out_transcripts;
  return d;
}

py::dict py_train(const std::string& config_path, std::optional<std::uint64_t> seed) {
  smc::TrainResult res = smc::train(load_with_seed(config_path, seed));
  py::dict d;
  d["steps"] = res.steps;
  d["checkpoint"] = res.final_checkpoint;
  d["metrics"] = res.metrics_log;
  return d;
}

double py_evaluate(const std::string& config_path, const std::string& checkpoint,
                   int beam) {
  smc::ExperimentConfig cfg = smc::load_config(config_path);
  const std::string stored = smc::read_checkpoint_config(checkpoint);
  if (smc::text_hash(stored) != smc::text_hash(smc::model_config_text(cfg.model))) {
    throw smc::UsageError("checkpoint does not match the configured architecture");
  }
  smc::LoadedModel lm = smc::load_model_from_checkpoint(checkpoint);
  smc::Dataset data = smc::load_dataset(cfg.data.eval_features, cfg.data.eval_transcripts);
  return smc::evaluate_dataset(lm.model, data, beam);
}

std::vector<py::tuple> py_l2_curve(const std::string& config_path,
                                   const std::string& checkpoint, int utt) {
  smc::ExperimentConfig cfg = smc::load_config(config_path);
  const std::string stored = smc::read_checkpoint_config(checkpoint);
  if (smc::text_hash(stored) != smc::text_hash(smc::model_config_text(cfg.model))) {
    throw smc::UsageError("checkpoint does not match the configured architecture");
  }
  smc::LoadedModel lm = smc::load_model_from_checkpoint(checkpoint);
  smc::Dataset data = smc::load_dataset(cfg.data.eval_features, cfg.data.eval_transcripts);
  if (utt < 0 || static_cast<std::size_t>(utt) >= data.size()) {
    throw smc::UsageError("utterance index outside the dataset");
  }
  auto rows = smc::l2_distance_profile(
      smc::features_tensor(data[static_cast<std::size_t>(utt)]), lm.model.encoder);
  std::vector<py::tuple> out;
  out.reserve(rows.size());
  for (const auto& r : rows) {
    out.push_back(py::make_tuple(r.index, r.group, r.block, r.transformation, r.distance));
  }
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "parameter-efficient MoE-conformer core";

  py::register_exception<smc::UsageError>(m, "UsageError", PyExc_ValueError);
  py::register_exception<smc::ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<smc::NonFiniteError>(m, "NonFiniteError", PyExc_ArithmeticError);

  m.def("softmax", &py_softmax, py::arg("logits"),
        "Numerically stable softmax of a vector.");
  m.def("swish", &py_swish, py::arg("xs"), "x * sigmoid(x), elementwise.");
  m.def("load_balance_loss", &py_balance_loss, py::arg("gates"), py::arg("chosen"),
        "E * sum_i f_i * mean_gate_i from per-token gates and expert choices.");
  m.def("lr_schedule", &smc::lr_schedule, py::arg("step"), py::arg("warmup"),
        py::arg("scale"), py::arg("d"),
        "Inverse-square-root schedule with linear warmup (Noam form).");
  m.def("edit_distance", &smc::edit_distance, py::arg("a"), py::arg("b"),
        "Levenshtein distance between token sequences.");

  m.def("count_params", &py_count_params, py::arg("blocks_per_group") = 1,
        py::arg("groups") = 1, py::arg("experts") = 1, py::arg("d") = 256,
        py::arg("heads") = 4, py::arg("kernel") = 15, py::arg("d_ff") = 1024,
        py::arg("feature_dim") = 80, py::arg("frontend_channels") = 32,
        py::arg("share_norms") = false, py::arg("share_routers") = false,
        "Encoder parameter accounting honoring the sharing topology.");
  m.def("count_params_file", &py_count_params_file, py::arg("config_path"));

  m.def("synth_data", &py_synth_data, py::arg("config_path"),
        py::arg("seed") = std::nullopt);
  m.def("train", &py_train, py::arg("config_path"), py::arg("seed") = std::nullopt,
        "Train per the config; returns steps, checkpoint and metrics paths.");
  m.def("evaluate", &py_evaluate, py::arg("config_path"), py::arg("checkpoint"),
        py::arg("beam") = 4, "Corpus token error rate of a checkpoint.");
  m.def("l2_curve", &py_l2_curve, py::arg("config_path"), py::arg("checkpoint"),
        py::arg("utt") = 0,
        "Per-transformation L2 distances as (index, group, block, name, distance).");
}
