#include "dmsk/config.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "dmsk/errors.hpp"

namespace dmsk {

namespace {

const std::map<std::string, std::string>& defaults() {
    static const std::map<std::string, std::string> d = {
        {"seed", "0"},
        {"corpus.fps", "20"},

        {"model.width", "128"},
        {"model.layers", "4"},
        {"model.heads", "4"},
        {"model.ffn", "512"},
        {"model.max_tokens", "257"},

        {"resid.width", "128"},
        {"resid.layers", "2"},
        {"resid.heads", "4"},
        {"resid.ffn", "256"},

        {"tokenizer.codebook", "128"},
        {"tokenizer.code_dim", "64"},
        {"tokenizer.quant_layers", "2"},
        {"tokenizer.downsample", "4"},
        {"tokenizer.hidden", "96"},
        {"tokenizer.beta", "0.25"},
        {"tokenizer.reset_window", "50"},

        {"train.batch", "8"},
        {"train.lr", "2e-4"},
        {"train.warmup", "200"},
        {"train.weight_decay", "0.01"},
        {"train.steps_tokenizer", "1500"},
        {"train.steps_t2m", "1800"},
        {"train.steps_music", "1100"},
        {"train.steps_pose", "1100"},
        {"train.steps_residual", "700"},
        {"train.cond_dropout", "0.1"},
        {"train.mask_floor", "0.1"},
        {"train.holdout_fraction", "0.125"},
        {"train.gumbel_temperature", "1.0"},
        {"train.log_every", "25"},

        {"loss.lambda_pos", "0.5"},
        {"loss.lambda_vel", "0.1"},
        {"loss.lambda_acc", "0.05"},
        {"loss.lambda_foot", "0.1"},
        {"loss.lambda_d", "1.0"},
        {"loss.lambda_unmask", "1.0"},
        {"loss.foot_static_threshold", "0.01"},

        {"sample.steps", "18"},
        {"sample.temperature", "1.0"},
        {"sample.residual_temperature", "1e-8"},
        {"sample.cfg_mode", "delta"},
        {"sample.w_u", "1.0"},
        {"sample.w_t", "4.0"},
        {"sample.w_a", "1.0"},
        {"sample.w_p", "1.0"},

        {"itto.lr", "0.06"},
        {"itto.iters", "196"},

        {"metrics.bas_sigma", "3.0"},
        {"metrics.h_contact", "0.05"},
        {"metrics.v_slide", "0.1"},
        {"metrics.smooth_window", "5"},
    };
    return d;
}

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    size_t b = s.find_last_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    return s.substr(a, b - a + 1);
}

}  // namespace

Config::Config() : values_(defaults()) {}

Config Config::load(const std::string& path) {
    Config c;
    c.apply_file(path);
    return c;
}

void Config::apply_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open config file: " + path);
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        const size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw DataError(path + ":" + std::to_string(lineno) + ": expected key=value");
        set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    }
}

void Config::set(const std::string& key, const std::string& value) {
    auto it = values_.find(key);
    if (it == values_.end()) throw DataError("unknown config key: " + key);
    it->second = value;
}

float Config::f(const std::string& key) const {
    const std::string& v = s(key);
    char* end = nullptr;
    const float r = std::strtof(v.c_str(), &end);
    if (end == v.c_str() || *end != '\0')
        throw DataError("config key " + key + " is not a number: " + v);
    return r;
}

int Config::i(const std::string& key) const {
    const std::string& v = s(key);
    char* end = nullptr;
    const long r = std::strtol(v.c_str(), &end, 10);
    if (end == v.c_str() || *end != '\0')
        throw DataError("config key " + key + " is not an integer: " + v);
    return static_cast<int>(r);
}

const std::string& Config::s(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw DataError("unknown config key: " + key);
    return it->second;
}

std::string Config::echo(const std::string& line_prefix) const {
    std::ostringstream out;
    for (const auto& [k, v] : values_) out << line_prefix << k << "=" << v << "\n";
    return out.str();
}

}  // namespace dmsk
