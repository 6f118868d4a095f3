// akd: command-line front end for data generation, teacher training,
// fine-tuning, adaptive distillation, evaluation and full pipelines.

#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <malloc.h>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "akd/bleu.hpp"
#include "akd/errors.hpp"
#include "akd/experiment.hpp"

namespace fs = std::filesystem;
using namespace akd;

namespace {

enum ExitCode : int { kOk = 0, kFailure = 1, kConfigError = 2, kDataError = 3, kDivergence = 4 };

struct Globals {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::string contribution;
    std::string temperature;
    bool no_smoothing = false;
};

std::string read_file(const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw ConfigError("cannot read config " + p.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::size_t env_threads() {
    const char* v = std::getenv("AKD_THREADS");
    if (!v || !*v) return 1;
    char* end = nullptr;
    const long n = std::strtol(v, &end, 10);
    if (*end != '\0' || n < 1) throw ConfigError("AKD_THREADS must be a positive integer, got '" + std::string(v) + "'");
    return static_cast<std::size_t>(n);
}

// Loads the experiment (or defaults) and applies seed, threads and ablation flags.
ExperimentConfig settings(const Globals& g, ConfigScope scope, std::string* text = nullptr) {
    ExperimentConfig c;
    if (!g.config.empty()) {
        const std::string t = read_file(g.config);
        c = parse_experiment(t, scope);
        if (text) *text = t;
    }
    if (g.seed) c.seeds = {*g.seed};
    AblationOverrides o;
    if (!g.contribution.empty()) o.contribution = parse_contribution_mode(g.contribution);
    if (!g.temperature.empty()) o.temperature = TemperatureMode::parse(g.temperature);
    o.no_smoothing = g.no_smoothing;
    apply_overrides(c, o);
    const std::size_t threads = env_threads();
    for (auto* t : {&c.teacher_train, &c.finetune, &c.student_train}) {
        t->threads = threads;
        t->seed = c.seeds.front();
    }
    return c;
}

ParallelCorpus load_prefix(const std::string& prefix, const Vocabulary& vocab, double ratio) {
    EncodeReport rep;
    auto corpus = load_parallel(prefix + ".src", prefix + ".tgt", vocab, &rep, ratio);
    corpus.name = fs::path(prefix).filename().string();
    std::cerr << "loaded " << prefix << ": " << corpus.size() << " pairs";
    if (rep.dropped_length_ratio) std::cerr << ", " << rep.dropped_length_ratio << " dropped by length ratio";
    if (rep.unk_tokens) std::cerr << ", " << rep.unk_tokens << " unknown tokens";
    std::cerr << "\n";
    return corpus;
}

void print_epoch(const EpochRecord& e) { std::cerr << to_json_line(e) << "\n"; }

int finish(const TrainResult& r, const fs::path& dir, const std::string& name) {
    fs::create_directories(dir);
    save_model(r.model, dir / (name + ".akdm"));
    std::ofstream log(dir / (name + ".log.jsonl"));
    for (const auto& e : r.epochs) log << to_json_line(e) << "\n";
    if (r.diverged) {
        std::cerr << "error: training diverged: " << r.divergence << "; kept last good checkpoint "
                  << (dir / (name + ".akdm")).string() << "\n";
        return kDivergence;
    }
    std::cout << (dir / (name + ".akdm")).string() << "\n";
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    // Keep freed tensor buffers in the heap instead of returning them to the OS.
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
    mallopt(M_TRIM_THRESHOLD, 512 << 20);

    CLI::App app{"Adaptive multi-teacher knowledge distillation for low-resource translation"};
    app.require_subcommand(1);
    Globals g;
    app.add_option("--config", g.config, "experiment config (JSON with comments)");
    app.add_option("--seed", g.seed, "override the seed list with one seed");
    app.add_option("--out", g.out, "output directory");
    app.add_option("--contribution", g.contribution, "teacher weighting")->check(CLI::IsMember({"adaptive", "equal"}));
    app.add_option("--temperature", g.temperature, "adaptive | none | fixed=TAU");
    app.add_flag("--no-smoothing", g.no_smoothing, "use raw per-batch weights");

    std::string vocab_path, train_prefix, dev_prefix, test_prefix, model_path, run_dir, trace_path, hyp_path;
    std::string teacher_name = "teacher", finetuned_name = "finetuned", student_name = "student";
    std::vector<std::string> teacher_paths;

    auto* gen = app.add_subcommand("gen-data", "write corpora and the shared vocabulary");
    auto* tt = app.add_subcommand("train-teacher", "train a model from scratch on one corpus");
    tt->add_option("--vocab", vocab_path)->required();
    tt->add_option("--train", train_prefix, "corpus prefix (<prefix>.src/.tgt)")->required();
    tt->add_option("--dev", dev_prefix);
    tt->add_option("--name", teacher_name, "output file stem")->capture_default_str();
    auto* ft = app.add_subcommand("finetune", "continue training a model on the low-resource corpus");
    ft->add_option("--model", model_path)->required();
    ft->add_option("--vocab", vocab_path)->required();
    ft->add_option("--train", train_prefix)->required();
    ft->add_option("--dev", dev_prefix);
    ft->add_option("--name", finetuned_name, "output file stem")->capture_default_str();
    auto* ds = app.add_subcommand("distill", "train a student from an ensemble of teachers");
    ds->add_option("--teacher", teacher_paths, "teacher model (repeat)")->required();
    ds->add_option("--vocab", vocab_path)->required();
    ds->add_option("--train", train_prefix)->required();
    ds->add_option("--dev", dev_prefix);
    ds->add_option("--name", student_name, "output file stem")->capture_default_str();
    auto* ev = app.add_subcommand("evaluate", "perplexity and BLEU of a model on a corpus");
    ev->add_option("--model", model_path)->required();
    ev->add_option("--vocab", vocab_path)->required();
    ev->add_option("--test", test_prefix)->required();
    ev->add_option("--hyp", hyp_path, "write decoded hypotheses here");
    auto* pl = app.add_subcommand("pipeline", "teachers, fine-tuning, baseline and distilled students");
    auto* tr = app.add_subcommand("trace", "reshape weight traces into long format");
    tr->add_option("--run", run_dir, "run directory holding students/*.trace.csv");
    tr->add_option("--trace", trace_path, "a single trace CSV");
    for (auto* sub : {gen, tt, ft, ds, ev, pl, tr}) sub->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kConfigError;
    }

    try {
        if (*gen) {
            if (g.config.empty()) throw ConfigError("gen-data needs --config");
            const auto c = settings(g, ConfigScope::Pipeline);
            const fs::path out = g.out.empty() ? fs::path("data") : fs::path(g.out);
            const auto data = prepare_data(c, c.seeds.front());
            write_data(data, out);
            std::cout << "wrote " << data.text.size() << " corpora and " << (out / "vocab.txt").string() << " ("
                      << data.vocab.size() << " tokens)\n";
            return kOk;
        }
        if (*tt || *ft || *ds) {
            const auto c = settings(g, ConfigScope::Stage);
            const fs::path out = g.out.empty() ? fs::path(".") : fs::path(g.out);
            const auto vocab = Vocabulary::load(vocab_path);
            const auto train = load_prefix(train_prefix, vocab, c.max_length_ratio);
            std::optional<ParallelCorpus> dev;
            if (!dev_prefix.empty()) dev = load_prefix(dev_prefix, vocab, c.max_length_ratio);
            const ParallelCorpus* devp = dev ? &*dev : nullptr;
            TrainHooks hooks;
            hooks.on_epoch = print_epoch;
            ModelConfig mc = c.model;
            mc.vocab_size = vocab.size();
            if (*tt) return finish(train_teacher(c.teacher_train, mc, train, devp, hooks), out, teacher_name);
            if (*ft) {
                const auto teacher = load_model(model_path, &vocab);
                return finish(finetune(teacher, train, devp, c.finetune, hooks), out, finetuned_name);
            }
            std::vector<Seq2SeqModel> teachers;
            for (const auto& p : teacher_paths) teachers.push_back(load_model(p, &vocab));
            TeacherEnsemble ensemble(std::move(teachers), c.distill.smoothing_decay, c.distill.temperature);
            const auto before = ensemble.checksums();
            const auto r = distill_train(train, devp, ensemble, c.distill, c.student_train, mc, hooks);
            if (ensemble.checksums() != before) throw Error("a teacher changed during distillation");
            fs::create_directories(out);
            write_trace_csv(out / (student_name + ".trace.csv"), r.trace);
            return finish(r, out, student_name);
        }
        if (*ev) {
            const auto vocab = Vocabulary::load(vocab_path);
            const auto model = load_model(model_path, &vocab);
            const auto test = load_prefix(test_prefix, vocab, 0.0);
            const auto hyps = translate_corpus(model, test);
            std::vector<Sentence> h, r;
            for (std::size_t i = 0; i < test.size(); ++i) {
                h.push_back(vocab.decode(hyps[i]));
                r.push_back(vocab.decode(test.pairs[i].tgt));
            }
            if (!hyp_path.empty()) {
                std::ofstream out(hyp_path);
                for (const auto& s : h) out << join_tokens(s) << "\n";
            }
            nlohmann::ordered_json j;
            j["sentences"] = test.size();
            j["perplexity"] = evaluate_perplexity(model, test);
            j["bleu"] = corpus_bleu(h, r);
            std::cout << j.dump() << "\n";
            return kOk;
        }
        if (*pl) {
            if (g.config.empty()) throw ConfigError("pipeline needs --config");
            PipelineOptions opt;
            const auto c = settings(g, ConfigScope::Pipeline, &opt.config_text);
            opt.out_dir = g.out.empty() ? fs::path("runs") : fs::path(g.out);
            opt.log = [](const std::string& m) { std::cerr << m << "\n"; };
            const auto table = run_pipeline(c, opt);
            std::cout << table.aligned_text();
            std::cout << "summary: " << (opt.out_dir / (config_hash(c) + "-summary")).string() << "\n";
            return kOk;
        }
        if (*tr) {
            std::vector<fs::path> traces;
            if (!trace_path.empty()) traces.push_back(trace_path);
            if (!run_dir.empty()) {
                const fs::path students = fs::path(run_dir) / "students";
                if (!fs::is_directory(students)) throw DataError("no students/ directory in " + run_dir);
                for (const auto& e : fs::directory_iterator(students)) {
                    const auto fname = e.path().filename().string();
                    if (fname.size() > 10 && fname.substr(fname.size() - 10) == ".trace.csv") traces.push_back(e.path());
                }
                std::sort(traces.begin(), traces.end());
            }
            if (traces.empty()) throw DataError("no weight trace found (give --run or --trace)");
            for (const auto& t : traces) {
                std::string stem = t.filename().string();
                stem = stem.substr(0, stem.find(".trace.csv"));
                const fs::path out = g.out.empty() ? t.parent_path() / (stem + ".plot") : fs::path(g.out) / stem;
                const auto n = export_trace(t, out);
                std::cout << out.string() << ": " << n << " rows\n";
            }
            return kOk;
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfigError;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kDataError;
    } catch (const LoadError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kDataError;
    } catch (const DivergenceError& e) {
        std::cerr << "training diverged: " << e.what() << "\n";
        return kDivergence;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kFailure;
    }
    return kFailure;
}
