#pragma once

// Run configuration: a flat-section TOML file plus CLI overrides, all
// funneled through one typed store. Unknown keys are rejected up
// front, and every field ships with a documented default.

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dream/completion.hpp"
#include "dream/dataset.hpp"
#include "dream/error.hpp"
#include "dream/evaluator.hpp"
#include "dream/model.hpp"
#include "dream/trainer.hpp"

namespace dream {

// ---- minimal TOML subset -----------------------------------------------------

// Sections of key = value pairs; values are strings, numbers, or booleans.
using TomlTable = std::map<std::string, std::map<std::string, std::string>>;

namespace toml_detail {

inline std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline std::string strip_comment(const std::string& line) {
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        if (line[i] == '"') quoted = !quoted;
        if (line[i] == '#' && !quoted) return line.substr(0, i);
    }
    return line;
}

inline std::string parse_value(const std::string& raw, std::size_t line_no) {
    if (raw.empty()) throw ConfigError("toml:" + std::to_string(line_no) + ": empty value");
    if (raw.front() == '"') {
        if (raw.size() < 2 || raw.back() != '"')
            throw ConfigError("toml:" + std::to_string(line_no) + ": unterminated string");
        std::string out;
        for (std::size_t i = 1; i + 1 < raw.size(); ++i) {
            if (raw[i] == '\\' && i + 2 < raw.size()) {
                ++i;
                switch (raw[i]) {
                    case 'n': out += '\n'; break;
                    case 't': out += '\t'; break;
                    case '"': out += '"'; break;
                    case '\\': out += '\\'; break;
                    default:
                        throw ConfigError("toml:" + std::to_string(line_no) +
                                          ": unsupported escape \\" + raw[i]);
                }
            } else {
                out += raw[i];
            }
        }
        return out;
    }
    return raw; // bare number / boolean
}

} // namespace toml_detail

inline TomlTable parse_toml(std::istream& in) {
    TomlTable table;
    std::string section;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        line = toml_detail::trim(toml_detail::strip_comment(line));
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw ConfigError("toml:" + std::to_string(line_no) + ": malformed section header");
            section = toml_detail::trim(line.substr(1, line.size() - 2));
            if (section.empty())
                throw ConfigError("toml:" + std::to_string(line_no) + ": empty section name");
            table[section];
            continue;
        }
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("toml:" + std::to_string(line_no) + ": expected key = value");
        const std::string key = toml_detail::trim(line.substr(0, eq));
        const std::string value = toml_detail::trim(line.substr(eq + 1));
        if (key.empty())
            throw ConfigError("toml:" + std::to_string(line_no) + ": empty key");
        if (section.empty())
            throw ConfigError("toml:" + std::to_string(line_no) + ": key outside any section");
        if (table[section].count(key))
            throw ConfigError("toml:" + std::to_string(line_no) + ": duplicate key " + section +
                              "." + key);
        table[section][key] = toml_detail::parse_value(value, line_no);
    }
    return table;
}

inline TomlTable parse_toml_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file: " + path);
    return parse_toml(in);
}

// ---- typed run configuration ----------------------------------------------------

struct RunConfig {
    // [data]
    std::string events_path;
    std::string social_path;
    std::string dataset_path; // binary artifact alternative to the TSVs
    Granularity granularity = Granularity::month;
    double split_train = 0.8, split_valid = 0.1, split_test = 0.1;

    // [model]
    std::size_t d = 64;
    std::size_t k_real = 10;
    std::size_t k_virtual = 10;
    std::string variant = "dream";
    int sessions = 2;
    bool aggregate_projected = false;
    bool literal_linear_gates = false;
    bool predict_from_tie_state = false;
    bool batch_norm = false;
    bool per_session_params = false;
    int attention_depth = 1;
    std::string head = "dot";
    std::size_t max_session_items = 20;

    // [glove]
    std::size_t glove_dim = 64;
    int glove_epochs = 30;
    double glove_lr = 0.05;
    double glove_x_max = 100.0;
    double glove_alpha = 0.75;

    // [train]
    double lr = 1e-4;
    std::size_t batch_size = 32;
    int max_epochs = 100;
    int patience = 5;
    double l2_lambda = 1e-5;
    double clip_norm = 5.0;
    std::size_t negatives_per_positive = 4;
    bool resample_friends_per_epoch = false;
    std::size_t validation_negatives = 1000;

    // [eval]
    std::size_t eval_negatives = 1000;
    int eval_repeats = 10;
    int eval_k = 10;

    // [run]
    std::uint64_t seed = 42;
    int threads = 1;

    void set(const std::string& section, const std::string& key, const std::string& value);
    void load_toml(const TomlTable& table);
    void validate() const;

    VariantConfig variant_config() const {
        VariantConfig v = VariantConfig::from_name(variant, sessions);
        if (variant != "dream-s1" && variant != "dream-s3") v.sessions = sessions;
        v.aggregate_projected = aggregate_projected;
        v.literal_linear_gates = literal_linear_gates;
        v.predict_from_tie_state = predict_from_tie_state;
        v.batch_norm = batch_norm;
        v.per_session_params = per_session_params;
        v.attention_depth = attention_depth;
        v.head = head == "mlp" ? RankHead::mlp : RankHead::dot;
        v.validate();
        return v;
    }

    TrainConfig train_config() const {
        TrainConfig t;
        t.lr = lr;
        t.batch_size = batch_size;
        t.max_epochs = max_epochs;
        t.patience = patience;
        t.seed = seed;
        t.l2_lambda = l2_lambda;
        t.clip_norm = clip_norm;
        t.negatives_per_positive = negatives_per_positive;
        t.max_session_items = max_session_items;
        t.resample_friends_per_epoch = resample_friends_per_epoch;
        t.validation_negatives = validation_negatives;
        t.validation_k = eval_k;
        return t;
    }

    GloveConfig glove_config() const {
        GloveConfig g;
        g.dim = glove_dim;
        g.epochs = glove_epochs;
        g.lr = glove_lr;
        g.x_max = glove_x_max;
        g.alpha = glove_alpha;
        g.seed = mix_seed(seed, hash_name("glove"));
        return g;
    }

    CompletionConfig completion_config() const {
        CompletionConfig c;
        c.k_real = k_real;
        c.k_virtual = k_virtual;
        c.seed = mix_seed(seed, hash_name("completion"));
        return c;
    }

    EvalConfig eval_config(SplitLabel split_label) const {
        EvalConfig e;
        e.split_label = split_label;
        e.negatives = eval_negatives;
        e.repeats = eval_repeats;
        e.k = eval_k;
        e.seed = mix_seed(seed, hash_name("evaluation"));
        e.threads = threads;
        e.max_session_items = max_session_items;
        return e;
    }
};

namespace config_detail {

inline bool parse_bool(const std::string& v, const std::string& where) {
    if (v == "true") return true;
    if (v == "false") return false;
    throw ConfigError(where + ": expected true or false, got '" + v + "'");
}

inline std::int64_t parse_int(const std::string& v, const std::string& where) {
    try {
        std::size_t pos = 0;
        const std::int64_t out = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("trailing");
        return out;
    } catch (const std::exception&) {
        throw ConfigError(where + ": expected an integer, got '" + v + "'");
    }
}

inline double parse_double(const std::string& v, const std::string& where) {
    try {
        std::size_t pos = 0;
        const double out = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("trailing");
        return out;
    } catch (const std::exception&) {
        throw ConfigError(where + ": expected a number, got '" + v + "'");
    }
}

} // namespace config_detail

inline void RunConfig::set(const std::string& section, const std::string& key,
                           const std::string& value) {
    using config_detail::parse_bool;
    using config_detail::parse_double;
    using config_detail::parse_int;
    const std::string where = section + "." + key;
    auto as_size = [&]() {
        const std::int64_t v = parse_int(value, where);
        if (v < 0) throw ConfigError(where + ": must be non-negative");
        return static_cast<std::size_t>(v);
    };

    if (section == "data") {
        if (key == "events") events_path = value;
        else if (key == "social") social_path = value;
        else if (key == "dataset") dataset_path = value;
        else if (key == "granularity") granularity = granularity_from_string(value);
        else if (key == "split_train") split_train = parse_double(value, where);
        else if (key == "split_valid") split_valid = parse_double(value, where);
        else if (key == "split_test") split_test = parse_double(value, where);
        else throw ConfigError("unknown config key " + where);
    } else if (section == "model") {
        if (key == "d") d = as_size();
        else if (key == "k_real") k_real = as_size();
        else if (key == "k_virtual") k_virtual = as_size();
        else if (key == "variant") variant = value;
        else if (key == "sessions") sessions = static_cast<int>(parse_int(value, where));
        else if (key == "aggregate_projected") aggregate_projected = parse_bool(value, where);
        else if (key == "literal_linear_gates") literal_linear_gates = parse_bool(value, where);
        else if (key == "predict_from_tie_state")
            predict_from_tie_state = parse_bool(value, where);
        else if (key == "batch_norm") batch_norm = parse_bool(value, where);
        else if (key == "per_session_params") per_session_params = parse_bool(value, where);
        else if (key == "attention_depth")
            attention_depth = static_cast<int>(parse_int(value, where));
        else if (key == "head") head = value;
        else if (key == "max_session_items") max_session_items = as_size();
        else throw ConfigError("unknown config key " + where);
    } else if (section == "glove") {
        if (key == "dim") glove_dim = as_size();
        else if (key == "epochs") glove_epochs = static_cast<int>(parse_int(value, where));
        else if (key == "lr") glove_lr = parse_double(value, where);
        else if (key == "x_max") glove_x_max = parse_double(value, where);
        else if (key == "alpha") glove_alpha = parse_double(value, where);
        else throw ConfigError("unknown config key " + where);
    } else if (section == "train") {
        if (key == "lr") lr = parse_double(value, where);
        else if (key == "batch_size") batch_size = as_size();
        else if (key == "max_epochs") max_epochs = static_cast<int>(parse_int(value, where));
        else if (key == "patience") patience = static_cast<int>(parse_int(value, where));
        else if (key == "l2_lambda") l2_lambda = parse_double(value, where);
        else if (key == "clip_norm") clip_norm = parse_double(value, where);
        else if (key == "negatives_per_positive") negatives_per_positive = as_size();
        else if (key == "resample_friends_per_epoch")
            resample_friends_per_epoch = parse_bool(value, where);
        else if (key == "validation_negatives") validation_negatives = as_size();
        else throw ConfigError("unknown config key " + where);
    } else if (section == "eval") {
        if (key == "negatives") eval_negatives = as_size();
        else if (key == "repeats") eval_repeats = static_cast<int>(parse_int(value, where));
        else if (key == "k") eval_k = static_cast<int>(parse_int(value, where));
        else throw ConfigError("unknown config key " + where);
    } else if (section == "run") {
        if (key == "seed") seed = static_cast<std::uint64_t>(parse_int(value, where));
        else if (key == "threads") threads = static_cast<int>(parse_int(value, where));
        else throw ConfigError("unknown config key " + where);
    } else {
        throw ConfigError("unknown config section [" + section + "]");
    }
}

inline void RunConfig::load_toml(const TomlTable& table) {
    for (const auto& [section, entries] : table)
        for (const auto& [key, value] : entries) set(section, key, value);
}

inline void RunConfig::validate() const {
    if (events_path.empty() && dataset_path.empty())
        throw ConfigError("config: either data.events or data.dataset is required");
    const double total = split_train + split_valid + split_test;
    if (std::abs(total - 1.0) > 1e-9)
        throw ConfigError("config: split ratios must sum to 1, got " + std::to_string(total));
    if (d == 0) throw ConfigError("config: model.d must be positive");
    if (glove_dim == 0) throw ConfigError("config: glove.dim must be positive");
    if (eval_repeats < 1) throw ConfigError("config: eval.repeats must be >= 1");
    if (eval_k < 1) throw ConfigError("config: eval.k must be >= 1");
    if (threads < 1) throw ConfigError("config: run.threads must be >= 1");
    if (head != "dot" && head != "mlp")
        throw ConfigError("config: model.head must be 'dot' or 'mlp'");
    variant_config();        // validates variant flags
    train_config().validate();
}

} // namespace dream
