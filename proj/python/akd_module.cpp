#include <algorithm>
#include <cmath>

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "akd/bleu.hpp"
#include "akd/distill.hpp"
#include "akd/errors.hpp"
#include "akd/experiment.hpp"
#include "akd/model.hpp"
#include "akd/vocab.hpp"

namespace py = pybind11;
using namespace akd;

namespace {

std::vector<Sentence> split_all(const std::vector<std::string>& lines) {
    std::vector<Sentence> out;
    out.reserve(lines.size());
    for (const auto& l : lines) out.push_back(split_tokens(l));
    return out;
}

py::dict row_dict(const ResultRow& r) {
    py::dict d;
    d["system"] = r.system;
    d["pair"] = r.pair;
    d["seed"] = r.seed;
    d["bleu"] = r.bleu;
    d["dev_ppl"] = r.dev_ppl;
    d["test_ppl"] = r.test_ppl;
    d["run_dir"] = r.run_dir;
    d["median"] = r.median;
    return d;
}

}  // namespace

PYBIND11_MODULE(_akd, m) {
    m.doc() = "Adaptive multi-teacher knowledge distillation core";

    auto base = py::register_exception<Error>(m, "Error");
    py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
    py::register_exception<DataError>(m, "DataError", base.ptr());
    py::register_exception<LoadError>(m, "LoadError", base.ptr());
    py::register_exception<DivergenceError>(m, "DivergenceError", base.ptr());
    py::register_exception<ShapeError>(m, "ShapeError", base.ptr());
    py::register_exception<ContractError>(m, "ContractError", base.ptr());

    m.def("adaptive_temperature", [](const std::vector<double>& s) { return adaptive_temperature(s); }, py::arg("s"));

    m.def(
        "contribution_weights",
        [](const std::vector<double>& ppl, const std::string& temperature) {
            const auto w = contribution_weights(ppl, TemperatureMode::parse(temperature));
            py::dict d;
            d["weights"] = w.raw;
            d["temperature"] = w.temperature;
            return d;
        },
        py::arg("perplexities"), py::arg("temperature") = "adaptive",
        "softmax(-ppl / tau); temperature is 'adaptive', 'none' or 'fixed=<tau>'");

    m.def(
        "smooth_weights",
        [](const std::vector<std::vector<double>>& raws, double decay) {
            std::vector<std::vector<double>> out;
            std::vector<double> prev;
            for (const auto& raw : raws) {
                if (prev.empty()) prev.assign(raw.size(), 1.0 / static_cast<double>(raw.size()));
                if (raw.size() != prev.size()) throw ContractError("smooth_weights: ragged input");
                std::vector<double> logs(raw.size());
                for (std::size_t l = 0; l < raw.size(); ++l) {
                    logs[l] = decay * std::log(std::max(prev[l], kWeightFloor)) +
                              (1.0 - decay) * std::log(std::max(raw[l], kWeightFloor));
                }
                prev = softmax_vector(logs);
                out.push_back(prev);
            }
            return out;
        },
        py::arg("raw_weights"), py::arg("decay") = 0.7, "running geometric average over a sequence of weight vectors");

    m.def(
        "lambda2_schedule",
        [](std::size_t step, std::size_t total, double start, double end, const std::string& shape) {
            DistillConfig c;
            c.lambda2_start = start;
            c.lambda2_end = end;
            c.anneal_shape = parse_anneal_shape(shape);
            c.validate();
            return lambda2_schedule(step, total, c);
        },
        py::arg("step"), py::arg("total_steps"), py::arg("start") = 0.5, py::arg("end") = 3.0,
        py::arg("shape") = "linear");

    m.def(
        "corpus_bleu",
        [](const std::vector<std::string>& hyps, const std::vector<std::string>& refs) {
            return corpus_bleu(split_all(hyps), split_all(refs));
        },
        py::arg("hypotheses"), py::arg("references"), "BLEU-4 over whitespace-tokenized lines");

    m.def(
        "load_config",
        [](const std::filesystem::path& path) {
            const auto c = load_experiment(path);
            py::dict d;
            d["json"] = experiment_to_json(c);
            d["hash"] = config_hash(c);
            return d;
        },
        py::arg("path"), "canonical JSON and hash of an experiment config");

    m.def(
        "gen_data",
        [](const std::filesystem::path& config, const std::filesystem::path& out, std::uint64_t seed) {
            const auto c = load_experiment(config);
            py::gil_scoped_release release;
            const auto data = prepare_data(c, seed);
            write_data(data, out);
            return data.vocab.size();
        },
        py::arg("config"), py::arg("out"), py::arg("seed") = 1, "writes corpora and vocab.txt; returns vocab size");

    m.def(
        "run_pipeline",
        [](const std::filesystem::path& config, const std::filesystem::path& out, std::optional<std::uint64_t> seed) {
            auto c = load_experiment(config);
            if (seed) c.seeds = {*seed};
            PipelineOptions opt;
            opt.out_dir = out;
            ResultsTable table;
            {
                py::gil_scoped_release release;
                table = run_pipeline(c, opt);
            }
            py::list rows;
            for (const auto& r : table.rows) rows.append(row_dict(r));
            for (const auto& r : table.median_rows()) rows.append(row_dict(r));
            return rows;
        },
        py::arg("config"), py::arg("out"), py::arg("seed") = py::none(), "full pipeline; returns result rows");

    m.def(
        "model_info",
        [](const std::filesystem::path& path) {
            const auto model = load_model(path);
            py::dict d;
            d["parameters"] = model.num_parameters();
            d["checksum"] = model.checksum();
            d["vocab_size"] = model.config().vocab_size;
            d["hidden_size"] = model.config().hidden_size;
            d["num_layers"] = model.config().num_layers;
            return d;
        },
        py::arg("path"));

    m.def(
        "export_trace",
        [](const std::filesystem::path& trace_csv, const std::filesystem::path& out) {
            return export_trace(trace_csv, out);
        },
        py::arg("trace_csv"), py::arg("out_dir"), "writes trace_long.csv and trace_first30.csv");
}
