#include "segmoe/config.hpp"

#include <charconv>
#include <cmath>
#include <sstream>

namespace segmoe {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::size_t parse_size(const std::string& field, const std::string& text) {
    std::size_t v = 0;
    const auto t = trim(text);
    const auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (ec != std::errc() || p != t.data() + t.size() || t.empty())
        throw ConfigError(field, "expected a non-negative integer, got '" + text + "'");
    return v;
}

double parse_double(const std::string& field, const std::string& text) {
    const auto t = trim(text);
    double v = 0.0;
    const auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (ec != std::errc() || p != t.data() + t.size() || t.empty() || !std::isfinite(v))
        throw ConfigError(field, "expected a number, got '" + text + "'");
    return v;
}

bool parse_bool(const std::string& field, const std::string& text) {
    const auto t = trim(text);
    if (t == "true" || t == "1" || t == "yes" || t == "on") return true;
    if (t == "false" || t == "0" || t == "no" || t == "off") return false;
    throw ConfigError(field, "expected true/false, got '" + text + "'");
}

std::string strip_prefix(const std::string& key, const std::string& prefix) {
    return key.rfind(prefix, 0) == 0 ? key.substr(prefix.size()) : key;
}

}  // namespace

std::string format_number(double x) {
    char buf[64];
    const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, x);
    return std::string(buf, p);
}

std::vector<std::size_t> parse_size_list(const std::string& field, const std::string& text) {
    std::vector<std::size_t> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(parse_size(field, item));
    if (out.empty()) throw ConfigError(field, "empty list");
    return out;
}

KeyValues model_config_entries(const ModelConfig& c) {
    return {
        {"blocks", std::to_string(c.blocks)},
        {"d_model", std::to_string(c.d_model)},
        {"d_ff", std::to_string(c.d_ff)},
        {"q_heads", std::to_string(c.q_heads)},
        {"kv_heads", std::to_string(c.kv_heads)},
        {"patch_len", std::to_string(c.patch_len)},
        {"lookback", std::to_string(c.lookback)},
        {"h_out", std::to_string(c.h_out)},
        {"experts", std::to_string(c.experts)},
        {"top_k", std::to_string(c.top_k)},
        {"omega", omega_to_string(c.omega)},
        {"dropout", format_number(c.dropout)},
        {"droppath", format_number(c.droppath)},
        {"rope_base", format_number(c.rope_base)},
        {"shared_expert", c.shared_expert ? "true" : "false"},
        {"head", c.head == HeadKind::Flatten ? "flatten" : "last"},
        {"tiled_attention", c.tiled_attention ? "true" : "false"},
        {"attention_tile", std::to_string(c.attention_tile)},
    };
}

KeyValues train_config_entries(const TrainConfig& c) {
    return {
        {"lr", format_number(c.lr)},
        {"min_lr", format_number(c.min_lr)},
        {"warmup", format_number(c.warmup)},
        {"beta1", format_number(c.beta1)},
        {"beta2", format_number(c.beta2)},
        {"eps", format_number(c.eps)},
        {"weight_decay", format_number(c.weight_decay)},
        {"clip_norm", format_number(c.clip_norm)},
        {"batch_size", std::to_string(c.batch_size)},
        {"max_epochs", std::to_string(c.max_epochs)},
        {"min_epochs", std::to_string(c.min_epochs)},
        {"patience", std::to_string(c.patience)},
        {"alpha", format_number(c.alpha)},
        {"delta", format_number(c.delta)},
        {"seed", std::to_string(c.seed)},
        {"train_stride", std::to_string(c.train_stride)},
        {"val_stride", std::to_string(c.val_stride)},
    };
}

bool set_model_field(ModelConfig& c, const std::string& raw_key, const std::string& v) {
    const std::string key = strip_prefix(raw_key, "model.");
    if (key == "blocks") c.blocks = parse_size(key, v);
    else if (key == "d_model") c.d_model = parse_size(key, v);
    else if (key == "d_ff") c.d_ff = parse_size(key, v);
    else if (key == "q_heads") c.q_heads = parse_size(key, v);
    else if (key == "kv_heads") c.kv_heads = parse_size(key, v);
    else if (key == "patch_len") c.patch_len = parse_size(key, v);
    else if (key == "lookback") c.lookback = parse_size(key, v);
    else if (key == "h_out") c.h_out = parse_size(key, v);
    else if (key == "experts") c.experts = parse_size(key, v);
    else if (key == "top_k") c.top_k = parse_size(key, v);
    else if (key == "omega") c.omega = parse_size_list(key, v);
    else if (key == "dropout") c.dropout = parse_double(key, v);
    else if (key == "droppath") c.droppath = parse_double(key, v);
    else if (key == "rope_base") c.rope_base = parse_double(key, v);
    else if (key == "shared_expert") c.shared_expert = parse_bool(key, v);
    else if (key == "tiled_attention") c.tiled_attention = parse_bool(key, v);
    else if (key == "attention_tile") c.attention_tile = parse_size(key, v);
    else if (key == "head") {
        const auto t = trim(v);
        if (t == "flatten") c.head = HeadKind::Flatten;
        else if (t == "last") c.head = HeadKind::LastToken;
        else throw ConfigError(key, "expected 'flatten' or 'last', got '" + v + "'");
    } else {
        return false;
    }
    return true;
}

bool set_train_field(TrainConfig& c, const std::string& raw_key, const std::string& v) {
    const std::string key = strip_prefix(raw_key, "train.");
    if (key == "lr") c.lr = parse_double(key, v);
    else if (key == "min_lr") c.min_lr = parse_double(key, v);
    else if (key == "warmup") c.warmup = parse_double(key, v);
    else if (key == "beta1") c.beta1 = parse_double(key, v);
    else if (key == "beta2") c.beta2 = parse_double(key, v);
    else if (key == "eps") c.eps = parse_double(key, v);
    else if (key == "weight_decay") c.weight_decay = parse_double(key, v);
    else if (key == "clip_norm") c.clip_norm = parse_double(key, v);
    else if (key == "batch_size") c.batch_size = parse_size(key, v);
    else if (key == "max_epochs") c.max_epochs = parse_size(key, v);
    else if (key == "min_epochs") c.min_epochs = parse_size(key, v);
    else if (key == "patience") c.patience = parse_size(key, v);
    else if (key == "alpha") c.alpha = parse_double(key, v);
    else if (key == "delta") c.delta = parse_double(key, v);
    else if (key == "seed") c.seed = parse_size(key, v);
    else if (key == "train_stride") c.train_stride = parse_size(key, v);
    else if (key == "val_stride") c.val_stride = parse_size(key, v);
    else return false;
    return true;
}

KeyValues parse_key_values(const std::string& text) {
    KeyValues out;
    std::stringstream ss(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("line " + std::to_string(lineno), "expected 'key = value', got '" + line + "'");
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError("line " + std::to_string(lineno), "missing key");
        out.emplace_back(std::move(key), std::move(value));
    }
    return out;
}

}  // namespace segmoe
