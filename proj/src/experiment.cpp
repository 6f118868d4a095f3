#include "akd/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include <json.hpp>

#include "akd/errors.hpp"

namespace akd {

using json = nlohmann::ordered_json;

namespace {

constexpr std::uint64_t kDataStream = 0xDA7A;
constexpr std::uint64_t kStudentStream = 0x57D7;

void check_keys(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
    if (!j.is_object()) throw ConfigError(where + ": expected an object");
    for (const auto& [key, value] : j.items()) {
        if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
            throw ConfigError(where + ": unknown key '" + key + "'");
        }
    }
}

template <class T>
void read(const json& j, const char* key, T& out, const std::string& where) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError(where + "." + key + ": wrong type");
    }
}

void read_size(const json& j, const char* key, std::size_t& out, const std::string& where) {
    if (!j.contains(key)) return;
    const auto& v = j.at(key);
    if (!v.is_number_integer() || v.get<long long>() < 0) {
        throw ConfigError(where + "." + key + ": expected a non-negative integer");
    }
    out = v.get<std::size_t>();
}

GrammarSpec parse_grammar(const json& j) {
    const std::string w = "data.family.grammar";
    check_keys(j, w, {"determiners", "nouns", "adjectives", "transitive_verbs", "intransitive_verbs", "adverbs",
                      "prepositions", "adjective_prob", "adverb_prob", "template_weights"});
    GrammarSpec g;
    read_size(j, "determiners", g.determiners, w);
    read_size(j, "nouns", g.nouns, w);
    read_size(j, "adjectives", g.adjectives, w);
    read_size(j, "transitive_verbs", g.transitive_verbs, w);
    read_size(j, "intransitive_verbs", g.intransitive_verbs, w);
    read_size(j, "adverbs", g.adverbs, w);
    read_size(j, "prepositions", g.prepositions, w);
    read(j, "adjective_prob", g.adjective_prob, w);
    read(j, "adverb_prob", g.adverb_prob, w);
    if (j.contains("template_weights")) {
        std::vector<double> tw;
        read(j, "template_weights", tw, w);
        if (tw.size() != 3) throw ConfigError(w + ".template_weights: expected 3 numbers");
        std::copy(tw.begin(), tw.end(), g.template_weights.begin());
    }
    return g;
}

json grammar_json(const GrammarSpec& g) {
    json j;
    j["determiners"] = g.determiners;
    j["nouns"] = g.nouns;
    j["adjectives"] = g.adjectives;
    j["transitive_verbs"] = g.transitive_verbs;
    j["intransitive_verbs"] = g.intransitive_verbs;
    j["adverbs"] = g.adverbs;
    j["prepositions"] = g.prepositions;
    j["adjective_prob"] = g.adjective_prob;
    j["adverb_prob"] = g.adverb_prob;
    j["template_weights"] = std::vector<double>(g.template_weights.begin(), g.template_weights.end());
    return j;
}

ModelConfig parse_model(const json& j) {
    const std::string w = "model";
    check_keys(j, w, {"hidden_size", "ffn_size", "num_layers", "num_heads", "dropout_rate", "label_smoothing",
                      "max_positions"});
    ModelConfig m;
    read_size(j, "hidden_size", m.hidden_size, w);
    read_size(j, "ffn_size", m.ffn_size, w);
    read_size(j, "num_layers", m.num_layers, w);
    read_size(j, "num_heads", m.num_heads, w);
    read(j, "dropout_rate", m.dropout_rate, w);
    read(j, "label_smoothing", m.label_smoothing, w);
    read_size(j, "max_positions", m.max_positions, w);
    return m;
}

json model_json(const ModelConfig& m) {
    json j;
    j["hidden_size"] = m.hidden_size;
    j["ffn_size"] = m.ffn_size;
    j["num_layers"] = m.num_layers;
    j["num_heads"] = m.num_heads;
    j["dropout_rate"] = m.dropout_rate;
    j["label_smoothing"] = m.label_smoothing;
    j["max_positions"] = m.max_positions;
    return j;
}

TrainConfig parse_train(const json& j, const std::string& w, TrainConfig t) {
    check_keys(j, w, {"epochs", "max_lr", "warmup_steps", "beta1", "beta2", "adam_eps", "max_tokens", "clip_norm",
                      "eval_bleu", "select_by_bleu"});
    read_size(j, "epochs", t.epochs, w);
    read(j, "max_lr", t.max_lr, w);
    read_size(j, "warmup_steps", t.warmup_steps, w);
    read(j, "beta1", t.beta1, w);
    read(j, "beta2", t.beta2, w);
    read(j, "adam_eps", t.adam_eps, w);
    read_size(j, "max_tokens", t.max_tokens, w);
    read(j, "clip_norm", t.clip_norm, w);
    read(j, "eval_bleu", t.eval_bleu, w);
    read(j, "select_by_bleu", t.select_by_bleu, w);
    return t;
}

json train_json(const TrainConfig& t) {
    json j;
    j["epochs"] = t.epochs;
    j["max_lr"] = t.max_lr;
    j["warmup_steps"] = t.warmup_steps;
    j["beta1"] = t.beta1;
    j["beta2"] = t.beta2;
    j["adam_eps"] = t.adam_eps;
    j["max_tokens"] = t.max_tokens;
    j["clip_norm"] = t.clip_norm;
    j["eval_bleu"] = t.eval_bleu;
    j["select_by_bleu"] = t.select_by_bleu;
    return j;
}

DistillConfig parse_distill(const json& j) {
    const std::string w = "distill";
    check_keys(j, w, {"lambda1", "lambda2_start", "lambda2_end", "anneal", "logistic_steepness", "smoothing_decay",
                      "smoothing", "temperature", "contribution"});
    DistillConfig d;
    read(j, "lambda1", d.lambda1, w);
    read(j, "lambda2_start", d.lambda2_start, w);
    read(j, "lambda2_end", d.lambda2_end, w);
    if (j.contains("anneal")) d.anneal_shape = parse_anneal_shape(j.at("anneal").get<std::string>());
    read(j, "logistic_steepness", d.logistic_steepness, w);
    read(j, "smoothing_decay", d.smoothing_decay, w);
    read(j, "smoothing", d.smoothing, w);
    if (j.contains("temperature")) d.temperature = TemperatureMode::parse(j.at("temperature").get<std::string>());
    if (j.contains("contribution")) d.contribution = parse_contribution_mode(j.at("contribution").get<std::string>());
    return d;
}

json distill_json(const DistillConfig& d) {
    json j;
    j["lambda1"] = d.lambda1;
    j["lambda2_start"] = d.lambda2_start;
    j["lambda2_end"] = d.lambda2_end;
    j["anneal"] = to_string(d.anneal_shape);
    j["logistic_steepness"] = d.logistic_steepness;
    j["smoothing_decay"] = d.smoothing_decay;
    j["smoothing"] = d.smoothing;
    j["temperature"] = d.temperature.to_string();
    j["contribution"] = to_string(d.contribution);
    return j;
}

std::string get_string(const json& j, const char* key, const std::string& where) {
    if (!j.contains(key) || !j.at(key).is_string()) throw ConfigError(where + "." + key + ": expected a string");
    return j.at(key).get<std::string>();
}

void parse_data(const json& j, ExperimentConfig& c) {
    const std::string w = "data";
    check_keys(j, w, {"family", "files", "dev_size", "test_size", "low_resource", "min_freq", "max_length_ratio"});
    if (j.contains("family") == j.contains("files")) {
        throw ConfigError("data: give exactly one of 'family' or 'files'");
    }
    read_size(j, "dev_size", c.dev_size, w);
    read_size(j, "test_size", c.test_size, w);
    read_size(j, "min_freq", c.min_freq, w);
    read(j, "max_length_ratio", c.max_length_ratio, w);
    c.low_resource = get_string(j, "low_resource", w);
    if (j.contains("family")) {
        c.synthetic = true;
        const json& f = j.at("family");
        const std::string fw = "data.family";
        check_keys(f, fw, {"languages", "relatedness", "relatedness_to_pivot", "sizes", "grammar"});
        std::vector<std::string> names;
        std::vector<std::size_t> sizes;
        read(f, "languages", names, fw);
        read(f, "sizes", sizes, fw);
        GrammarSpec grammar = f.contains("grammar") ? parse_grammar(f.at("grammar")) : GrammarSpec{};
        if (f.contains("relatedness") == f.contains("relatedness_to_pivot")) {
            throw ConfigError(fw + ": give exactly one of 'relatedness' or 'relatedness_to_pivot'");
        }
        if (f.contains("relatedness_to_pivot")) {
            std::vector<double> to_pivot;
            read(f, "relatedness_to_pivot", to_pivot, fw);
            c.family = FamilySpec::star(names, to_pivot, sizes, grammar);
        } else {
            c.family.names = names;
            c.family.sizes = sizes;
            c.family.grammar = grammar;
            read(f, "relatedness", c.family.relatedness, fw);
        }
    } else {
        c.synthetic = false;
        if (!j.at("files").is_array()) throw ConfigError("data.files: expected a list");
        for (const auto& f : j.at("files")) {
            check_keys(f, "data.files[]", {"name", "train", "dev", "test"});
            FileCorpusSpec s;
            s.name = get_string(f, "name", "data.files[]");
            s.train = get_string(f, "train", "data.files[]");
            read(f, "dev", s.dev, "data.files[]");
            read(f, "test", s.test, "data.files[]");
            c.files.push_back(s);
        }
    }
}

std::optional<bool> optional_bool(const json& j, const char* key, const std::string& w) {
    if (!j.contains(key)) return std::nullopt;
    if (!j.at(key).is_boolean()) throw ConfigError(w + "." + key + ": expected true or false");
    return j.at(key).get<bool>();
}

std::vector<std::string> language_names(const ExperimentConfig& c) {
    if (c.synthetic) return c.family.names;
    std::vector<std::string> names;
    for (const auto& f : c.files) names.push_back(f.name);
    return names;
}

}  // namespace

void ExperimentConfig::validate() const {
    if (seeds.empty()) throw ConfigError("seeds: need at least one seed");
    const auto names = language_names(*this);
    const std::set<std::string> known(names.begin(), names.end());
    if (known.size() != names.size()) throw ConfigError("data: language names must be unique");
    if (synthetic) family.validate();
    if (!known.count(low_resource)) throw ConfigError("data.low_resource: unknown language '" + low_resource + "'");
    if (dev_size == 0 || test_size == 0) throw ConfigError("data: dev_size and test_size must be positive");
    ModelConfig m = model;
    m.vocab_size = std::max<std::size_t>(m.vocab_size, kNumReserved + 1);
    m.validate();
    teacher_train.validate();
    finetune.validate();
    student_train.validate();
    distill.validate();
    if (teachers.empty()) throw ConfigError("teachers: need at least one teacher");
    std::set<std::string> teacher_names;
    for (const auto& t : teachers) {
        if (!known.count(t.language)) throw ConfigError("teachers: unknown language '" + t.language + "'");
        if (t.language == low_resource) throw ConfigError("teachers: '" + t.language + "' is the low-resource pair");
        if (!teacher_names.insert(t.language).second) throw ConfigError("teachers: duplicate '" + t.language + "'");
    }
    std::set<std::string> system_names{"individual"};
    for (const auto& s : systems) {
        if (s.name.empty() || s.name.find_first_of("/\\ ,") != std::string::npos) {
            throw ConfigError("systems: invalid name '" + s.name + "'");
        }
        if (s.name.rfind("transfer:", 0) == 0 || !system_names.insert(s.name).second) {
            throw ConfigError("systems: duplicate or reserved name '" + s.name + "'");
        }
        if (s.teachers.empty()) throw ConfigError("systems." + s.name + ": no teachers");
        for (const auto& t : s.teachers) {
            if (!teacher_names.count(t)) throw ConfigError("systems." + s.name + ": '" + t + "' is not a teacher");
        }
        system_distill(s).validate();
    }
}

DistillConfig ExperimentConfig::system_distill(const SystemSpec& s) const {
    DistillConfig d = distill;
    if (s.contribution) d.contribution = *s.contribution;
    if (s.temperature) d.temperature = *s.temperature;
    if (s.smoothing) d.smoothing = *s.smoothing;
    return d;
}

ExperimentConfig parse_experiment(std::string_view text, ConfigScope scope) {
    const bool full = scope == ConfigScope::Pipeline;
    json j;
    try {
        j = json::parse(text.begin(), text.end(), nullptr, true, true);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    check_keys(j, "config", {"name", "seeds", "data", "model", "teacher_train", "finetune", "student_train",
                             "distill", "teachers", "systems"});
    ExperimentConfig c;
    try {
        read(j, "name", c.name, "config");
        read(j, "seeds", c.seeds, "config");
        if (j.contains("data")) {
            parse_data(j.at("data"), c);
        } else if (full) {
            throw ConfigError("config: missing 'data'");
        }
        if (j.contains("model")) c.model = parse_model(j.at("model"));
        if (j.contains("teacher_train")) c.teacher_train = parse_train(j.at("teacher_train"), "teacher_train", {});
        c.finetune = c.teacher_train;
        c.student_train = c.teacher_train;
        if (j.contains("finetune")) c.finetune = parse_train(j.at("finetune"), "finetune", c.teacher_train);
        if (j.contains("student_train")) {
            c.student_train = parse_train(j.at("student_train"), "student_train", c.teacher_train);
        }
        if (j.contains("distill")) c.distill = parse_distill(j.at("distill"));
        if (full && !j.contains("teachers")) throw ConfigError("teachers: expected a list");
        if (j.contains("teachers") && !j.at("teachers").is_array()) throw ConfigError("teachers: expected a list");
        for (const auto& t : j.value("teachers", json::array())) {
            TeacherSpec spec;
            if (t.is_string()) {
                spec.language = t.get<std::string>();
            } else {
                check_keys(t, "teachers[]", {"language", "train_epochs", "finetune_epochs"});
                spec.language = get_string(t, "language", "teachers[]");
                std::size_t e = 0;
                if (t.contains("train_epochs")) {
                    read_size(t, "train_epochs", e, "teachers[]");
                    spec.train_epochs = e;
                }
                if (t.contains("finetune_epochs")) {
                    read_size(t, "finetune_epochs", e, "teachers[]");
                    spec.finetune_epochs = e;
                }
            }
            c.teachers.push_back(spec);
        }
        if (j.contains("systems")) {
            if (!j.at("systems").is_array()) throw ConfigError("systems: expected a list");
            for (const auto& s : j.at("systems")) {
                const std::string w = "systems[]";
                check_keys(s, w, {"name", "teachers", "contribution", "temperature", "smoothing"});
                SystemSpec spec;
                spec.name = get_string(s, "name", w);
                if (s.contains("teachers")) {
                    read(s, "teachers", spec.teachers, w);
                } else {
                    for (const auto& t : c.teachers) spec.teachers.push_back(t.language);
                }
                if (s.contains("contribution")) {
                    spec.contribution = parse_contribution_mode(get_string(s, "contribution", w));
                }
                if (s.contains("temperature")) {
                    spec.temperature = TemperatureMode::parse(get_string(s, "temperature", w));
                }
                spec.smoothing = optional_bool(s, "smoothing", w);
                c.systems.push_back(spec);
            }
        } else {
            SystemSpec spec;
            spec.name = "adaptive-kd";
            for (const auto& t : c.teachers) spec.teachers.push_back(t.language);
            c.systems.push_back(spec);
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    if (full) {
        c.validate();
    } else {
        ModelConfig m = c.model;
        m.vocab_size = std::max<std::size_t>(m.vocab_size, kNumReserved + 1);
        m.validate();
        c.teacher_train.validate();
        c.finetune.validate();
        c.student_train.validate();
        c.distill.validate();
    }
    return c;
}

ExperimentConfig load_experiment(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_experiment(ss.str());
}

std::string experiment_to_json(const ExperimentConfig& c) {
    json j;
    j["name"] = c.name;
    j["seeds"] = c.seeds;
    json data;
    if (c.synthetic) {
        json f;
        f["languages"] = c.family.names;
        f["relatedness"] = c.family.relatedness;
        f["sizes"] = c.family.sizes;
        f["grammar"] = grammar_json(c.family.grammar);
        data["family"] = f;
    } else {
        json files = json::array();
        for (const auto& s : c.files) files.push_back({{"name", s.name}, {"train", s.train}, {"dev", s.dev}, {"test", s.test}});
        data["files"] = files;
    }
    data["dev_size"] = c.dev_size;
    data["test_size"] = c.test_size;
    data["low_resource"] = c.low_resource;
    data["min_freq"] = c.min_freq;
    data["max_length_ratio"] = c.max_length_ratio;
    j["data"] = data;
    j["model"] = model_json(c.model);
    j["teacher_train"] = train_json(c.teacher_train);
    j["finetune"] = train_json(c.finetune);
    j["student_train"] = train_json(c.student_train);
    j["distill"] = distill_json(c.distill);
    json teachers = json::array();
    for (const auto& t : c.teachers) {
        json tj;
        tj["language"] = t.language;
        if (t.train_epochs) tj["train_epochs"] = *t.train_epochs;
        if (t.finetune_epochs) tj["finetune_epochs"] = *t.finetune_epochs;
        teachers.push_back(tj);
    }
    j["teachers"] = teachers;
    json systems = json::array();
    for (const auto& s : c.systems) {
        json sj;
        sj["name"] = s.name;
        sj["teachers"] = s.teachers;
        if (s.contribution) sj["contribution"] = to_string(*s.contribution);
        if (s.temperature) sj["temperature"] = s.temperature->to_string();
        if (s.smoothing) sj["smoothing"] = *s.smoothing;
        systems.push_back(sj);
    }
    j["systems"] = systems;
    return j.dump(2);
}

std::string config_hash(const ExperimentConfig& c) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << fnv1a64(experiment_to_json(c));
    return os.str().substr(0, 12);
}

void apply_overrides(ExperimentConfig& c, const AblationOverrides& o) {
    if (o.contribution) c.distill.contribution = *o.contribution;
    if (o.temperature) c.distill.temperature = *o.temperature;
    if (o.no_smoothing) c.distill.smoothing = false;
}

// ---------------------------------------------------------------------------
// Data

PreparedData prepare_data(const ExperimentConfig& c, std::uint64_t seed) {
    PreparedData d;
    if (c.synthetic) {
        const std::uint64_t family_seed = derive_seed(seed, kDataStream);
        const SyntheticFamily fam = generate_family(c.family, family_seed);
        for (std::size_t i = 0; i < fam.languages.size(); ++i) {
            LanguageSplits s;
            s.train = fam.corpora[i];
            s.dev = sample_corpus(fam, i, c.dev_size, derive_seed(family_seed, 2 * i + 1));
            s.test = sample_corpus(fam, i, c.test_size, derive_seed(family_seed, 2 * i + 2));
            d.text.emplace(fam.languages[i].name, std::move(s));
        }
    } else {
        for (const auto& f : c.files) {
            LanguageSplits s;
            s.train = read_text_corpus(f.train + ".src", f.train + ".tgt", f.name);
            if (!f.dev.empty()) s.dev = read_text_corpus(f.dev + ".src", f.dev + ".tgt", f.name);
            if (!f.test.empty()) s.test = read_text_corpus(f.test + ".src", f.test + ".tgt", f.name);
            d.text.emplace(f.name, std::move(s));
        }
    }
    std::vector<TextCorpus> train_texts;
    for (const auto& name : language_names(c)) train_texts.push_back(d.text.at(name).train);
    d.vocab = build_vocab(train_texts, c.min_freq);
    for (const auto& [name, s] : d.text) {
        EncodeReport rep;
        d.train[name] = encode_corpus(s.train, d.vocab, &rep, c.max_length_ratio);
        d.reports[name] = rep;
        d.dev[name] = encode_corpus(s.dev, d.vocab, nullptr, c.max_length_ratio);
        d.test[name] = encode_corpus(s.test, d.vocab, nullptr, c.max_length_ratio);
    }
    const auto& lr = d.text.at(c.low_resource);
    if (lr.dev.pairs.empty() || lr.test.pairs.empty()) {
        throw DataError("low-resource pair '" + c.low_resource + "' needs dev and test splits");
    }
    return d;
}

void write_data(const PreparedData& d, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    for (const auto& [name, s] : d.text) {
        const auto base = dir / name;
        write_text_corpus(s.train, base.string() + ".train.src", base.string() + ".train.tgt");
        if (!s.dev.pairs.empty()) write_text_corpus(s.dev, base.string() + ".dev.src", base.string() + ".dev.tgt");
        if (!s.test.pairs.empty()) write_text_corpus(s.test, base.string() + ".test.src", base.string() + ".test.tgt");
    }
    d.vocab.save(dir / "vocab.txt");
}

// ---------------------------------------------------------------------------
// Results

double median(std::vector<double> v) {
    if (v.empty()) throw ContractError("median of an empty list");
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::vector<std::string> ResultsTable::systems() const {
    std::vector<std::string> names;
    for (const auto& r : rows) {
        if (!r.median && std::find(names.begin(), names.end(), r.system) == names.end()) names.push_back(r.system);
    }
    return names;
}

std::vector<ResultRow> ResultsTable::median_rows() const {
    std::vector<ResultRow> out;
    for (const auto& name : systems()) {
        std::vector<double> bleu, dev, test;
        ResultRow m;
        for (const auto& r : rows) {
            if (r.median || r.system != name) continue;
            bleu.push_back(r.bleu);
            dev.push_back(r.dev_ppl);
            test.push_back(r.test_ppl);
            m.pair = r.pair;
        }
        m.system = name;
        m.bleu = median(bleu);
        m.dev_ppl = median(dev);
        m.test_ppl = median(test);
        m.median = true;
        out.push_back(m);
    }
    return out;
}

void ResultsTable::write_csv(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    out << "system,pair,seed,bleu,dev_ppl,test_ppl,run_dir\n" << std::setprecision(10);
    auto emit = [&](const ResultRow& r) {
        out << r.system << ',' << r.pair << ',' << (r.median ? std::string("median") : std::to_string(r.seed)) << ','
            << r.bleu << ',' << r.dev_ppl << ',' << r.test_ppl << ',' << r.run_dir << '\n';
    };
    for (const auto& r : rows) emit(r);
    if (!rows.empty()) {
        for (const auto& r : median_rows()) emit(r);
    }
}

std::string ResultsTable::aligned_text() const {
    const auto names = systems();
    std::vector<std::string> seeds;
    for (const auto& r : rows) {
        const std::string s = std::to_string(r.seed);
        if (!r.median && std::find(seeds.begin(), seeds.end(), s) == seeds.end()) seeds.push_back(s);
    }
    std::vector<std::vector<std::string>> grid;
    std::vector<std::string> header{"seed"};
    header.insert(header.end(), names.begin(), names.end());
    grid.push_back(header);
    auto fmt = [](double x) {
        std::ostringstream os;
        os << std::fixed << std::setprecision(2) << x;
        return os.str();
    };
    for (const auto& s : seeds) {
        std::vector<std::string> line{s};
        for (const auto& n : names) {
            std::string cell = "-";
            for (const auto& r : rows) {
                if (!r.median && r.system == n && std::to_string(r.seed) == s) cell = fmt(r.bleu);
            }
            line.push_back(cell);
        }
        grid.push_back(line);
    }
    if (!rows.empty()) {
        std::vector<std::string> line{"median"};
        for (const auto& m : median_rows()) line.push_back(fmt(m.bleu));
        grid.push_back(line);
    }
    std::vector<std::size_t> width(header.size(), 0);
    for (const auto& line : grid)
        for (std::size_t i = 0; i < line.size(); ++i) width[i] = std::max(width[i], line[i].size());
    std::ostringstream os;
    if (!rows.empty()) os << "BLEU on " << rows.front().pair << "\n";
    for (std::size_t k = 0; k < grid.size(); ++k) {
        for (std::size_t i = 0; i < grid[k].size(); ++i) {
            if (i) os << "  ";
            os << (i == 0 ? std::left : std::right) << std::setw(static_cast<int>(width[i])) << grid[k][i];
        }
        os << '\n';
        if (k == 0 || k + 2 == grid.size()) {
            std::size_t total = 0;
            for (auto w : width) total += w + 2;
            os << std::string(total - 2, '-') << '\n';
        }
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// Pipeline

namespace {

template <class F>
auto stage(const std::string& name, F&& fn) -> decltype(fn()) {
    const std::string p = "stage '" + name + "' failed: ";
    try {
        return fn();
    } catch (const ConfigError& e) {
        throw ConfigError(p + e.what());
    } catch (const DataError& e) {
        throw DataError(p + e.what());
    } catch (const DivergenceError& e) {
        throw DivergenceError(p + e.what());
    } catch (const LoadError& e) {
        throw LoadError(p + e.what());
    } catch (const std::exception& e) {
        throw Error(p + e.what());
    }
}

void write_lines(const std::filesystem::path& path, const std::vector<EpochRecord>& epochs) {
    std::ofstream out(path);
    for (const auto& e : epochs) out << to_json_line(e) << '\n';
}

// Saves the checkpoint; divergence still leaves the last good model on disk.
Seq2SeqModel keep(const TrainResult& r, const std::filesystem::path& model_path,
                  const std::filesystem::path& log_path) {
    save_model(r.model, model_path);
    write_lines(log_path, r.epochs);
    if (r.diverged) throw DivergenceError(r.divergence + " (last good checkpoint: " + model_path.string() + ")");
    return r.model;
}

std::uint64_t name_stream(const std::string& name) { return fnv1a64(name); }

}  // namespace

std::filesystem::path run_directory(const ExperimentConfig& c, std::uint64_t seed, const std::filesystem::path& out) {
    return out / (config_hash(c) + "-seed" + std::to_string(seed));
}

SeedRun run_pipeline_seed(const ExperimentConfig& c, std::uint64_t seed, const PipelineOptions& opt) {
    c.validate();
    auto log = [&](const std::string& msg) {
        if (opt.log) opt.log("[seed " + std::to_string(seed) + "] " + msg);
    };
    SeedRun run;
    run.dir = run_directory(c, seed, opt.out_dir);
    namespace fs = std::filesystem;
    for (const char* sub : {"data", "teachers", "finetuned", "students"}) fs::create_directories(run.dir / sub);
    {
        std::ofstream(run.dir / "config.jsonc") << (opt.config_text.empty() ? experiment_to_json(c) : opt.config_text);
        std::ofstream(run.dir / "config.effective.json") << experiment_to_json(c) << '\n';
    }

    PreparedData data = stage("gen-data", [&] {
        auto d = prepare_data(c, seed);
        write_data(d, run.dir / "data");
        return d;
    });
    ModelConfig mc = c.model;
    mc.vocab_size = data.vocab.size();
    const std::string& lr = c.low_resource;
    const std::string pair = lr;
    log("vocabulary " + std::to_string(mc.vocab_size) + " tokens");

    ResultsTable partial;
    auto record = [&](const std::string& system, const Seq2SeqModel& model) {
        ResultRow row;
        row.system = system;
        row.pair = pair;
        row.seed = seed;
        row.dev_ppl = evaluate_perplexity(model, data.dev.at(lr), c.student_train.max_tokens);
        row.test_ppl = evaluate_perplexity(model, data.test.at(lr), c.student_train.max_tokens);
        row.bleu = evaluate_bleu(model, data.test.at(lr), c.student_train.max_tokens);
        row.run_dir = run.dir.string();
        run.rows.push_back(row);
        partial.rows = run.rows;
        partial.write_csv(run.dir / "results.csv");
        std::ostringstream os;
        os << std::fixed << std::setprecision(2) << system << ": BLEU " << row.bleu << ", test ppl "
           << row.test_ppl;
        log(os.str());
    };

    std::map<std::string, Seq2SeqModel> finetuned;
    for (const auto& t : c.teachers) {
        TrainConfig tc = c.teacher_train;
        tc.seed = derive_seed(seed, name_stream("teacher:" + t.language));
        if (t.train_epochs) tc.epochs = *t.train_epochs;
        const Seq2SeqModel teacher = stage("train-teacher " + t.language, [&] {
            const auto r = train_teacher(tc, mc, data.train.at(t.language),
                                         data.dev.at(t.language).size() ? &data.dev.at(t.language) : nullptr);
            return keep(r, run.dir / "teachers" / (t.language + ".akdm"),
                        run.dir / "teachers" / (t.language + ".log.jsonl"));
        });
        log("teacher " + t.language + " trained");
        TrainConfig fc = c.finetune;
        fc.seed = derive_seed(seed, name_stream("finetune:" + t.language));
        if (t.finetune_epochs) fc.epochs = *t.finetune_epochs;
        Seq2SeqModel tuned = stage("finetune " + t.language, [&] {
            const auto r = finetune(teacher, data.train.at(lr), &data.dev.at(lr), fc);
            return keep(r, run.dir / "finetuned" / (t.language + ".akdm"),
                        run.dir / "finetuned" / (t.language + ".log.jsonl"));
        });
        stage("evaluate transfer:" + t.language, [&] { record("transfer:" + t.language, tuned); });
        finetuned.emplace(t.language, std::move(tuned));
    }

    TrainConfig sc = c.student_train;
    sc.seed = derive_seed(seed, kStudentStream);
    const Seq2SeqModel individual = stage("individual", [&] {
        const auto r = train_teacher(sc, mc, data.train.at(lr), &data.dev.at(lr));
        return keep(r, run.dir / "students" / "individual.akdm", run.dir / "students" / "individual.log.jsonl");
    });
    stage("evaluate individual", [&] { record("individual", individual); });

    for (const auto& s : c.systems) {
        std::vector<Seq2SeqModel> members;
        for (const auto& t : s.teachers) members.push_back(finetuned.at(t).clone());
        const DistillConfig dc = c.system_distill(s);
        TeacherEnsemble ensemble(std::move(members), dc.smoothing_decay, dc.temperature);
        const auto before = ensemble.checksums();
        const Seq2SeqModel student = stage("distill " + s.name, [&] {
            const auto r = distill_train(data.train.at(lr), &data.dev.at(lr), ensemble, dc, sc, mc);
            write_trace_csv(run.dir / "students" / (s.name + ".trace.csv"), r.trace);
            run.traces[s.name] = r.trace;
            return keep(r, run.dir / "students" / (s.name + ".akdm"), run.dir / "students" / (s.name + ".log.jsonl"));
        });
        const auto after = ensemble.checksums();
        for (std::size_t l = 0; l < s.teachers.size(); ++l) {
            run.teacher_checksums_before[s.name + ":" + s.teachers[l]] = before[l];
            run.teacher_checksums_after[s.name + ":" + s.teachers[l]] = after[l];
            if (before[l] != after[l]) {
                throw Error("stage 'distill " + s.name + "' failed: teacher " + s.teachers[l] + " was modified");
            }
        }
        stage("evaluate " + s.name, [&] { record(s.name, student); });
    }
    return run;
}

ResultsTable run_pipeline(const ExperimentConfig& c, const PipelineOptions& opt, std::vector<SeedRun>* runs) {
    ResultsTable table;
    const auto summary = opt.out_dir / (config_hash(c) + "-summary");
    std::filesystem::create_directories(summary);
    for (auto seed : c.seeds) {
        SeedRun r = run_pipeline_seed(c, seed, opt);
        table.rows.insert(table.rows.end(), r.rows.begin(), r.rows.end());
        table.write_csv(summary / "results.csv");
        std::ofstream(summary / "results.txt") << table.aligned_text();
        if (runs) runs->push_back(std::move(r));
    }
    return table;
}

// ---------------------------------------------------------------------------
// Traces

std::vector<LongTraceRow> trace_long_format(std::span<const TraceRow> rows) {
    std::vector<LongTraceRow> out;
    for (const auto& r : rows) {
        if (r.alpha_raw.size() != r.alpha_smoothed.size()) throw DataError("trace row with mismatched weights");
        for (std::size_t l = 0; l < r.alpha_raw.size(); ++l) {
            out.push_back({r.step, l, r.alpha_raw[l], r.alpha_smoothed[l]});
        }
    }
    return out;
}

void write_long_trace(const std::filesystem::path& path, std::span<const LongTraceRow> rows) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    out << "iteration,teacher,weight_raw,weight_smoothed\n" << std::setprecision(17);
    for (const auto& r : rows) out << r.iteration << ',' << r.teacher << ',' << r.weight_raw << ',' << r.weight_smoothed << '\n';
}

std::size_t export_trace(const std::filesystem::path& trace_csv, const std::filesystem::path& out_dir) {
    const auto rows = read_trace_csv(trace_csv);
    for (const auto& r : rows) {
        double raw = 0.0, smooth = 0.0;
        for (double a : r.alpha_raw) raw += a;
        for (double a : r.alpha_smoothed) smooth += a;
        if (std::abs(raw - 1.0) > 1e-6 || std::abs(smooth - 1.0) > 1e-6) {
            throw DataError("trace step " + std::to_string(r.step) + ": weights do not sum to 1");
        }
    }
    const auto long_rows = trace_long_format(rows);
    std::filesystem::create_directories(out_dir);
    write_long_trace(out_dir / "trace_long.csv", long_rows);
    const std::size_t first = std::min<std::size_t>(rows.size(), 30);
    const std::span<const TraceRow> head(rows.data(), first);
    write_long_trace(out_dir / "trace_first30.csv", trace_long_format(head));
    return long_rows.size();
}

}  // namespace akd
