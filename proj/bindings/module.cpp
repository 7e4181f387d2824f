#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "speclab/analytics.hpp"
#include "speclab/corpus.hpp"
#include "speclab/runconfig.hpp"
#include "speclab/serialize.hpp"
#include "speclab/training.hpp"

namespace py = pybind11;
using namespace speclab;

namespace {

std::vector<int32_t> tokens_from_bytes(const py::bytes& b) {
    const std::string s = b;
    std::vector<int32_t> out;
    out.reserve(s.size());
    for (unsigned char c : s) out.push_back(static_cast<int32_t>(c));
    return out;
}

py::bytes bytes_from_tokens(std::span<const int32_t> tokens) {
    std::string s;
    s.reserve(tokens.size());
    for (int32_t t : tokens) s.push_back(static_cast<char>(static_cast<unsigned char>(t)));
    return py::bytes(s);
}

py::array_t<double> np_from_tensor(const Tensor& t) {
    std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
    py::array_t<double> out(shape);
    std::memcpy(out.mutable_data(), t.data().data(), sizeof(double) * t.numel());
    return out;
}

Tensor tensor_from_np(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
    Shape shape(a.ndim());
    for (py::ssize_t i = 0; i < a.ndim(); ++i) shape[i] = a.shape(i);
    std::vector<double> data(a.data(), a.data() + a.size());
    return Tensor::from_data(std::move(shape), std::move(data));
}

py::dict dict_from_report(const ParamReport& r) {
    py::dict d;
    py::dict comps;
    for (const auto& [name, n] : r.components) comps[py::str(name)] = n;
    d["components"] = comps;
    d["total_with_embedding"] = r.total_with_embedding;
    d["total_without_embedding"] = r.total_without_embedding;
    return d;
}

EagleDrafter make_drafter(const DraftModel& draft, const RouterHead* router) {
    return EagleDrafter(draft, router);
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "speculative decoding laboratory: training, drafting, verification, analytics";

    py::register_exception<ConfigError>(m, "ConfigError");
    py::register_exception<DependencyError>(m, "DependencyError");
    py::register_exception<DataError>(m, "DataError");
    py::register_exception<ContractError>(m, "ContractError");

    py::class_<ModelConfig>(m, "ModelConfig")
        .def(py::init<>())
        .def_readwrite("vocab_size", &ModelConfig::vocab_size)
        .def_readwrite("hidden_size", &ModelConfig::hidden_size)
        .def_readwrite("num_layers", &ModelConfig::num_layers)
        .def_readwrite("num_heads", &ModelConfig::num_heads)
        .def_readwrite("intermediate_size", &ModelConfig::intermediate_size)
        .def_readwrite("max_seq_len", &ModelConfig::max_seq_len)
        .def_readwrite("head_groups", &ModelConfig::head_groups)
        .def_readwrite("router_top_n", &ModelConfig::router_top_n)
        .def("validate", &ModelConfig::validate);

    py::class_<TrainConfig>(m, "TrainConfig")
        .def(py::init<>())
        .def_readwrite("w_reg", &TrainConfig::w_reg)
        .def_readwrite("w_cls", &TrainConfig::w_cls)
        .def_readwrite("w_csra", &TrainConfig::w_csra)
        .def_readwrite("csra_temperature", &TrainConfig::csra_temperature)
        .def_readwrite("steps", &TrainConfig::steps)
        .def_readwrite("batch", &TrainConfig::batch)
        .def_readwrite("seq", &TrainConfig::seq)
        .def_readwrite("lr", &TrainConfig::lr)
        .def_readwrite("epochs", &TrainConfig::epochs)
        .def_readwrite("weight_decay", &TrainConfig::weight_decay)
        .def_readwrite("clip_norm", &TrainConfig::clip_norm)
        .def_readwrite("warmup", &TrainConfig::warmup)
        .def_readwrite("seed", &TrainConfig::seed)
        .def_readwrite("include_target_positives", &TrainConfig::include_target_positives)
        .def("validate", &TrainConfig::validate);

    py::enum_<DraftMode>(m, "DraftMode")
        .value("Chain", DraftMode::Chain)
        .value("Tree", DraftMode::Tree);

    py::class_<EngineConfig>(m, "EngineConfig")
        .def(py::init<>())
        .def_readwrite("mode", &EngineConfig::mode)
        .def_readwrite("gamma", &EngineConfig::gamma)
        .def_readwrite("tree_depth", &EngineConfig::tree_depth)
        .def_readwrite("tree_budget", &EngineConfig::tree_budget)
        .def_readwrite("temperature", &EngineConfig::temperature)
        .def_readwrite("use_router", &EngineConfig::use_router)
        .def_readwrite("router_top_n", &EngineConfig::router_top_n)
        .def_readwrite("seed", &EngineConfig::seed)
        .def_readwrite("max_new_tokens", &EngineConfig::max_new_tokens)
        .def_readwrite("eos_token", &EngineConfig::eos_token)
        .def("validate", &EngineConfig::validate);

    py::class_<TargetModel>(m, "TargetModel")
        .def_property_readonly("config", [](const TargetModel& t) { return t.config; });
    py::class_<DraftModel>(m, "DraftModel")
        .def_property_readonly("config", [](const DraftModel& d) { return d.config; });
    py::class_<RouterHead>(m, "RouterHead")
        .def_property_readonly("config", [](const RouterHead& r) { return r.config; });

    py::class_<CycleRecord>(m, "CycleRecord")
        .def_readonly("drafted", &CycleRecord::drafted)
        .def_readonly("accepted", &CycleRecord::accepted)
        .def_readonly("emitted", &CycleRecord::emitted)
        .def_readonly("depth_flags", &CycleRecord::depth_flags)
        .def_readonly("active_groups", &CycleRecord::active_groups)
        .def_readonly("lmhead_rows_draft", &CycleRecord::lmhead_rows_draft)
        .def_readonly("draft_ms", &CycleRecord::draft_ms)
        .def_readonly("verify_ms", &CycleRecord::verify_ms);

    py::class_<Metrics>(m, "Metrics")
        .def_readonly("tau", &Metrics::tau)
        .def_readonly("cycles", &Metrics::cycles)
        .def_readonly("tokens", &Metrics::tokens)
        .def_readonly("speedup_measured", &Metrics::speedup_measured)
        .def_readonly("speedup_modeled", &Metrics::speedup_modeled)
        .def_readonly("activated_fraction", &Metrics::activated_fraction)
        .def_readonly("lmhead_rows_draft", &Metrics::lmhead_rows_draft)
        .def_readonly("warning", &Metrics::warning)
        .def_property_readonly("alpha", [](const Metrics& m) { return m.alpha.alpha; });

    // ---- corpus ----
    m.def(
        "markov_corpus",
        [](uint64_t seed, int64_t length) { return bytes_from_tokens(markov_corpus(seed, length)); },
        py::arg("seed"), py::arg("length"),
        "Seeded order-2 Markov byte corpus over a small printable alphabet.");

    // ---- training ----
    m.def(
        "pretrain_target",
        [](const py::bytes& corpus, const ModelConfig& mcfg, const TrainConfig& tcfg) {
            auto tokens = tokens_from_bytes(corpus);
            PretrainResult res;
            {
                py::gil_scoped_release release;
                res = pretrain_target(tokens, mcfg, tcfg);
            }
            return py::make_tuple(res.model, res.held_out_ce);
        },
        py::arg("corpus"), py::arg("model_config"), py::arg("train_config"),
        "Pretrains the target LM; returns (model, held_out_ce).");

    m.def(
        "train_draft",
        [](const TargetModel& target, const py::bytes& corpus, const TrainConfig& cfg) {
            auto tokens = tokens_from_bytes(corpus);
            py::gil_scoped_release release;
            return train_draft(target, tokens, cfg).model;
        },
        py::arg("target"), py::arg("corpus"), py::arg("train_config"));

    m.def(
        "train_router",
        [](const TargetModel& target, const DraftModel& draft, const py::bytes& corpus,
           const TrainConfig& cfg, const std::string& cache_path) {
            auto tokens = tokens_from_bytes(corpus);
            py::gil_scoped_release release;
            return train_router(target, draft, tokens, cfg, cache_path);
        },
        py::arg("target"), py::arg("draft"), py::arg("corpus"), py::arg("train_config"),
        py::arg("cache_path") = "");

    // ---- persistence ----
    m.def("save_target", &save_target);
    m.def("load_target", &load_target);
    m.def("save_draft", &save_draft);
    m.def("load_draft", &load_draft);
    m.def("save_router", &save_router);
    m.def("load_router", &load_router);

    m.def("count_target_params",
          [](const TargetModel& t) { return dict_from_report(count_params(t)); });
    m.def("count_draft_params",
          [](const DraftModel& d) { return dict_from_report(count_params(d)); });
    m.def("count_router_params",
          [](const RouterHead& r) { return dict_from_report(count_params(r)); });

    // ---- inference ----
    m.def(
        "generate",
        [](const TargetModel& target, const DraftModel& draft, const EngineConfig& cfg,
           const py::bytes& prompt, const RouterHead* router) {
            auto tokens = tokens_from_bytes(prompt);
            GenerateResult res;
            {
                py::gil_scoped_release release;
                EagleDrafter drafter = make_drafter(draft, router);
                res = generate(target, drafter, cfg, tokens);
            }
            return py::make_tuple(bytes_from_tokens(res.tokens), res.records);
        },
        py::arg("target"), py::arg("draft"), py::arg("engine_config"), py::arg("prompt"),
        py::arg("router") = nullptr,
        "Speculative generation; returns (continuation bytes, cycle records).");

    m.def(
        "vanilla_generate",
        [](const TargetModel& target, const py::bytes& prompt, int64_t max_new_tokens,
           double temperature, uint64_t seed) {
            auto tokens = tokens_from_bytes(prompt);
            py::gil_scoped_release release;
            auto out = vanilla_generate(target, tokens, max_new_tokens, temperature, seed);
            py::gil_scoped_acquire acquire;
            return bytes_from_tokens(out);
        },
        py::arg("target"), py::arg("prompt"), py::arg("max_new_tokens"),
        py::arg("temperature") = 0.0, py::arg("seed") = 0);

    m.def(
        "target_forward",
        [](const TargetModel& target, const py::bytes& tokens) {
            NoGradGuard ng;
            auto ids = tokens_from_bytes(tokens);
            ForwardRows fwd = target_forward(target, ids, nullptr);
            return py::make_tuple(np_from_tensor(fwd.features), np_from_tensor(fwd.logits));
        },
        py::arg("target"), py::arg("tokens"),
        "Full causal forward; returns (features [SxD], logits [SxV]).");

    m.def(
        "router_forward",
        [](const RouterHead& router, const py::array_t<double>& h) {
            NoGradGuard ng;
            return np_from_tensor(router_forward(router, tensor_from_np(h)));
        },
        py::arg("router"), py::arg("hidden"));

    m.def(
        "grouped_head_prob",
        [](const DraftModel& draft, const py::array_t<double>& h, const py::array_t<double>& p_router,
           const std::vector<int>& active_groups) {
            GroupedDistribution g = grouped_head_prob(tensor_from_np(h), tensor_from_np(p_router),
                                                      active_groups, draft.lm_head, draft.config);
            py::dict d;
            d["probs"] = g.probs;
            d["active_groups"] = g.active_groups;
            d["active_mass"] = g.active_mass;
            return d;
        },
        py::arg("draft"), py::arg("hidden"), py::arg("p_router"), py::arg("active_groups"));

    // ---- analytics ----
    m.def(
        "measured_speedup",
        [](const TargetModel& target, const DraftModel& draft, const EngineConfig& cfg,
           const std::vector<py::bytes>& prompts, const RouterHead* router) {
            std::vector<std::vector<int32_t>> toks;
            for (const auto& p : prompts) toks.push_back(tokens_from_bytes(p));
            py::gil_scoped_release release;
            EagleDrafter drafter = make_drafter(draft, router);
            return measured_speedup(target, drafter, cfg, toks, &draft);
        },
        py::arg("target"), py::arg("draft"), py::arg("engine_config"), py::arg("prompts"),
        py::arg("router") = nullptr);

    m.def("acceptance_length", [](const std::vector<CycleRecord>& recs) {
        return acceptance_length(recs);
    });
    m.def("acceptance_rates", [](const std::vector<CycleRecord>& recs) {
        AlphaReport a = acceptance_rates(recs);
        return py::make_tuple(a.alpha, a.reached, a.accepted);
    });
    m.def(
        "speedup_from_latency",
        [](double tau, int64_t gamma, double target_ms, double target_parallel_ms, double draft_ms) {
            return speedup_from_latency(tau, gamma, {target_ms, target_parallel_ms, draft_ms});
        },
        py::arg("tau"), py::arg("gamma"), py::arg("target_ms"), py::arg("target_parallel_ms"),
        py::arg("draft_ms"));
    m.def("speedup_from_params", &speedup_from_params, py::arg("tau"), py::arg("gamma"),
          py::arg("w_draft"), py::arg("w_target"));
    m.def("latency_ratio_estimate", &latency_ratio_estimate, py::arg("w_draft"), py::arg("w_target"));

    m.def(
        "cross_step_infonce",
        [](const TargetModel& target, const DraftModel& draft, const py::bytes& corpus,
           int64_t steps, double tau_c, int64_t batch, int64_t seq, uint64_t seed,
           int64_t max_batches) {
            auto tokens = tokens_from_bytes(corpus);
            py::gil_scoped_release release;
            return cross_step_infonce(target, draft, tokens, steps, tau_c, batch, seq, seed,
                                      max_batches);
        },
        py::arg("target"), py::arg("draft"), py::arg("corpus"), py::arg("steps"),
        py::arg("tau_c") = 0.07, py::arg("batch") = 4, py::arg("seq") = 32, py::arg("seed") = 0,
        py::arg("max_batches") = 8);
}
