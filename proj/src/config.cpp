#include "ahmf/config.hpp"

#include <algorithm>
#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <set>

#include "ahmf/rng.hpp"

namespace ahmf {

namespace {

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    std::size_t b = s.find_last_not_of(" \t\r");
    if (a == std::string::npos) return "";
    return s.substr(a, b - a + 1);
}

[[noreturn]] void bad_value(const std::string& key, const char* want, const std::string& v) {
    throw ConfigError("config: key '" + key + "' needs " + want + ", got '" + v + "'");
}

long long parse_ll(const std::string& key, const std::string& v) {
    errno = 0;
    char* end = nullptr;
    const long long x = std::strtoll(v.c_str(), &end, 10);
    if (v.empty() || errno != 0 || end != v.c_str() + v.size())
        bad_value(key, "an integer", v);
    return x;
}

int parse_int(const std::string& key, const std::string& v) {
    const long long x = parse_ll(key, v);
    if (x < -(1ll << 31) || x >= (1ll << 31)) bad_value(key, "a 32-bit integer", v);
    return static_cast<int>(x);
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    if (v.empty() || v[0] == '-') bad_value(key, "a nonnegative integer", v);
    errno = 0;
    char* end = nullptr;
    const unsigned long long x = std::strtoull(v.c_str(), &end, 10);
    if (errno != 0 || end != v.c_str() + v.size()) bad_value(key, "a nonnegative integer", v);
    return static_cast<std::uint64_t>(x);
}

double parse_double(const std::string& key, const std::string& v) {
    errno = 0;
    char* end = nullptr;
    const double x = std::strtod(v.c_str(), &end);
    if (v.empty() || errno != 0 || end != v.c_str() + v.size() || !std::isfinite(x))
        bad_value(key, "a finite number", v);
    return x;
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    bad_value(key, "true or false", v);
}

std::vector<std::string> split_csv(const std::string& v) {
    std::vector<std::string> out;
    std::size_t at = 0;
    while (at <= v.size()) {
        const std::size_t comma = v.find(',', at);
        const std::size_t end = comma == std::string::npos ? v.size() : comma;
        out.push_back(trim(v.substr(at, end - at)));
        if (comma == std::string::npos) break;
        at = comma + 1;
    }
    return out;
}

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

struct KeyDef {
    const char* name;
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

const std::vector<KeyDef>& key_table() {
    static const std::vector<KeyDef> table = {
        {"seed", [](RunConfig& c, const std::string& v) { c.seed = parse_u64("seed", v); },
         [](const RunConfig& c) { return std::to_string(c.seed); }},
        {"domains",
         [](RunConfig& c, const std::string& v) {
             auto parts = split_csv(v);
             std::set<std::string> seen;
             for (const auto& d : parts) {
                 if (d.empty()) bad_value("domains", "non-empty comma-separated names", v);
                 if (!seen.insert(d).second)
                     throw ConfigError("config: domain '" + d + "' listed twice");
             }
             c.domains = std::move(parts);
         },
         [](const RunConfig& c) {
             std::string out;
             for (std::size_t i = 0; i < c.domains.size(); ++i)
                 out += (i ? "," : "") + c.domains[i];
             return out;
         }},
        {"n", [](RunConfig& c, const std::string& v) { c.n_per_domain = parse_int("n", v); },
         [](const RunConfig& c) { return std::to_string(c.n_per_domain); }},

        {"data.h", [](RunConfig& c, const std::string& v) { c.scene.h = parse_int("data.h", v); },
         [](const RunConfig& c) { return std::to_string(c.scene.h); }},
        {"data.w", [](RunConfig& c, const std::string& v) { c.scene.w = parse_int("data.w", v); },
         [](const RunConfig& c) { return std::to_string(c.scene.w); }},
        {"data.t", [](RunConfig& c, const std::string& v) { c.scene.t = parse_int("data.t", v); },
         [](const RunConfig& c) { return std::to_string(c.scene.t); }},
        {"data.n_movers",
         [](RunConfig& c, const std::string& v) { c.scene.n_movers = parse_int("data.n_movers", v); },
         [](const RunConfig& c) { return std::to_string(c.scene.n_movers); }},
        {"data.memory_task",
         [](RunConfig& c, const std::string& v) { c.scene.memory_task = parse_bool("data.memory_task", v); },
         [](const RunConfig& c) { return c.scene.memory_task ? "true" : "false"; }},
        {"data.noise_sigma",
         [](RunConfig& c, const std::string& v) { c.scene.noise_sigma = parse_double("data.noise_sigma", v); },
         [](const RunConfig& c) { return fmt_double(c.scene.noise_sigma); }},
        {"data.jitter_sigma",
         [](RunConfig& c, const std::string& v) { c.scene.jitter_sigma = parse_double("data.jitter_sigma", v); },
         [](const RunConfig& c) { return fmt_double(c.scene.jitter_sigma); }},
        {"data.blob_sigma",
         [](RunConfig& c, const std::string& v) { c.scene.blob_sigma = parse_double("data.blob_sigma", v); },
         [](const RunConfig& c) { return fmt_double(c.scene.blob_sigma); }},
        {"data.speed_min",
         [](RunConfig& c, const std::string& v) { c.scene.speed_min = parse_double("data.speed_min", v); },
         [](const RunConfig& c) { return fmt_double(c.scene.speed_min); }},
        {"data.speed_max",
         [](RunConfig& c, const std::string& v) { c.scene.speed_max = parse_double("data.speed_max", v); },
         [](const RunConfig& c) { return fmt_double(c.scene.speed_max); }},

        {"model.stub_channels",
         [](RunConfig& c, const std::string& v) {
             std::vector<int> ch;
             for (const auto& p : split_csv(v)) ch.push_back(parse_int("model.stub_channels", p));
             c.model.stub_channels = std::move(ch);
         },
         [](const RunConfig& c) {
             std::string out;
             for (std::size_t i = 0; i < c.model.stub_channels.size(); ++i)
                 out += (i ? "," : "") + std::to_string(c.model.stub_channels[i]);
             return out;
         }},
        {"model.attn_dim",
         [](RunConfig& c, const std::string& v) { c.model.attn_dim = parse_int("model.attn_dim", v); },
         [](const RunConfig& c) { return std::to_string(c.model.attn_dim); }},
        {"model.gru_hidden",
         [](RunConfig& c, const std::string& v) { c.model.gru_hidden = parse_int("model.gru_hidden", v); },
         [](const RunConfig& c) { return std::to_string(c.model.gru_hidden); }},
        {"model.n_priors",
         [](RunConfig& c, const std::string& v) { c.model.n_priors = parse_int("model.n_priors", v); },
         [](const RunConfig& c) { return std::to_string(c.model.n_priors); }},
        {"model.memory_channels",
         [](RunConfig& c, const std::string& v) { c.model.memory_channels = parse_int("model.memory_channels", v); },
         [](const RunConfig& c) { return std::to_string(c.model.memory_channels); }},
        {"model.memory_upsample",
         [](RunConfig& c, const std::string& v) { c.model.memory_upsample = parse_int("model.memory_upsample", v); },
         [](const RunConfig& c) { return std::to_string(c.model.memory_upsample); }},
        {"model.heads",
         [](RunConfig& c, const std::string& v) { c.model.heads = parse_int("model.heads", v); },
         [](const RunConfig& c) { return std::to_string(c.model.heads); }},
        {"model.bank_slots",
         [](RunConfig& c, const std::string& v) { c.model.bank_slots = parse_int("model.bank_slots", v); },
         [](const RunConfig& c) { return std::to_string(c.model.bank_slots); }},
        {"model.ema_alpha",
         [](RunConfig& c, const std::string& v) { c.model.ema_alpha = parse_double("model.ema_alpha", v); },
         [](const RunConfig& c) { return fmt_double(c.model.ema_alpha); }},
        {"model.loss_eps",
         [](RunConfig& c, const std::string& v) { c.model.loss_eps = parse_double("model.loss_eps", v); },
         [](const RunConfig& c) { return fmt_double(c.model.loss_eps); }},

        {"train.lr0",
         [](RunConfig& c, const std::string& v) { c.train.lr0 = parse_double("train.lr0", v); },
         [](const RunConfig& c) { return fmt_double(c.train.lr0); }},
        {"train.decay",
         [](RunConfig& c, const std::string& v) { c.train.decay = parse_double("train.decay", v); },
         [](const RunConfig& c) { return fmt_double(c.train.decay); }},
        {"train.momentum",
         [](RunConfig& c, const std::string& v) { c.train.momentum = parse_double("train.momentum", v); },
         [](const RunConfig& c) { return fmt_double(c.train.momentum); }},
        {"train.weight_decay",
         [](RunConfig& c, const std::string& v) { c.train.weight_decay = parse_double("train.weight_decay", v); },
         [](const RunConfig& c) { return fmt_double(c.train.weight_decay); }},
        {"train.batch_size",
         [](RunConfig& c, const std::string& v) { c.train.batch_size = parse_int("train.batch_size", v); },
         [](const RunConfig& c) { return std::to_string(c.train.batch_size); }},
        {"train.max_epochs",
         [](RunConfig& c, const std::string& v) { c.train.max_epochs = parse_int("train.max_epochs", v); },
         [](const RunConfig& c) { return std::to_string(c.train.max_epochs); }},
        {"train.patience",
         [](RunConfig& c, const std::string& v) { c.train.patience = parse_int("train.patience", v); },
         [](const RunConfig& c) { return std::to_string(c.train.patience); }},
        {"train.seq_len",
         [](RunConfig& c, const std::string& v) { c.train.seq_len = parse_int("train.seq_len", v); },
         [](const RunConfig& c) { return std::to_string(c.train.seq_len); }},
        {"train.ablation",
         [](RunConfig& c, const std::string& v) { c.train.ablation = ablation_from_string(v); },
         [](const RunConfig& c) { return ablation_to_string(c.train.ablation); }},
        {"train.update_position",
         [](RunConfig& c, const std::string& v) {
             c.train.update_position = update_position_from_string(v);
         },
         [](const RunConfig& c) { return update_position_to_string(c.train.update_position); }},
        {"train.dropout",
         [](RunConfig& c, const std::string& v) { c.train.dropout = parse_double("train.dropout", v); },
         [](const RunConfig& c) { return fmt_double(c.train.dropout); }},
    };
    return table;
}

}  // namespace

void apply_key(RunConfig& cfg, const std::string& key, const std::string& value) {
    if (key.rfind("rule.", 0) == 0) {
        const std::string domain = key.substr(5);
        if (domain.empty()) throw ConfigError("config: key 'rule.' names no domain");
        cfg.rules[domain] = data::rule_from_string(value);
        return;
    }
    for (const auto& def : key_table()) {
        if (key == def.name) {
            def.set(cfg, value);
            return;
        }
    }
    throw ConfigError("config: unknown key '" + key + "'");
}

RunConfig parse_config_text(const std::string& text, const std::string& where,
                            RunConfig base) {
    RunConfig cfg = std::move(base);
    std::size_t at = 0;
    int line_no = 0;
    while (at <= text.size()) {
        const std::size_t nl = text.find('\n', at);
        const std::size_t end = nl == std::string::npos ? text.size() : nl;
        const std::string line = trim(text.substr(at, end - at));
        ++line_no;
        if (!line.empty() && line[0] != '#') {
            const std::size_t eq = line.find('=');
            if (eq == std::string::npos)
                throw ConfigError("config " + where + " line " + std::to_string(line_no) +
                                  ": expected key = value, got '" + line + "'");
            try {
                apply_key(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
            } catch (const ConfigError& e) {
                throw ConfigError(std::string(e.what()) + " (" + where + " line " +
                                  std::to_string(line_no) + ")");
            }
        }
        if (nl == std::string::npos) break;
        at = nl + 1;
    }
    return cfg;
}

RunConfig load_config(const std::string& path) {
    return parse_config_text(data::read_file(path), "'" + path + "'");
}

data::SceneSpec RunConfig::scene_for(const std::string& domain) const {
    data::SceneSpec s = scene;
    s.domain_id = domain;
    auto it = rules.find(domain);
    s.rule = it != rules.end() ? it->second : data::DomainRule::attend_leftmost;
    s.seed = Rng(seed, "data/" + domain, 0).next_u64();
    return s;
}

void RunConfig::finalize() {
    if (domains.empty()) throw ConfigError("config: domains must be non-empty");
    for (const auto& [d, r] : rules) {
        (void)r;
        if (std::find(domains.begin(), domains.end(), d) == domains.end())
            throw ConfigError("config: rule for unknown domain '" + d + "'");
    }
    if (n_per_domain < 1) throw ConfigError("config: n must be >= 1");
    model.frame_h = scene.h;
    model.frame_w = scene.w;
    model.seq_len = train.seq_len;
    model.ablation = train.ablation;
    model.update_position = train.update_position;
    model.dropout_rate = train.dropout;
    train.seed = seed;
    model.validate();
    train.validate();
}

std::string resolved_text(const RunConfig& cfg) {
    std::string out;
    for (const auto& def : key_table()) {
        out += def.name;
        out += " = ";
        out += def.get(cfg);
        out += "\n";
        if (std::string(def.name) == "domains") {
            for (const auto& d : cfg.domains) {
                auto it = cfg.rules.find(d);
                const auto rule = it != cfg.rules.end() ? it->second
                                                        : data::DomainRule::attend_leftmost;
                out += "rule." + d + " = " + data::rule_name(rule) + "\n";
            }
        }
    }
    return out;
}

}  // namespace ahmf
