#include "vgp/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace vgp {

namespace {

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

std::size_t parse_size(const std::string& key, const std::string& value) {
    std::size_t out = 0;
    auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
    if (ec != std::errc{} || ptr != value.data() + value.size())
        throw ConfigError("config: field '" + key + "' expects a non-negative integer, got '" +
                          value + "'");
    return out;
}

double parse_real(const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        double out = std::stod(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
        return out;
    } catch (const std::exception&) {
        throw ConfigError("config: field '" + key + "' expects a real number, got '" + value +
                          "'");
    }
}

bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    throw ConfigError("config: field '" + key + "' expects true/false, got '" + value + "'");
}

}  // namespace

void RunConfig::validate() const {
    model.validate();
    if (prompt_r >= model.d)
        throw ConfigError("config: field 'prompt.r' must be strictly less than model.d (" +
                          std::to_string(prompt_r) + " >= " + std::to_string(model.d) + ")");
    if (prompt_r < 1) throw ConfigError("config: field 'prompt.r' must be >= 1");
    if (alpha < 0.0 || alpha > 1.0)
        throw ConfigError("config: field 'prompt.alpha' must lie in [0, 1], got " +
                          std::to_string(alpha));
    if (beta < 0.0 || beta > 1.0)
        throw ConfigError("config: field 'prompt.beta' must lie in [0, 1], got " +
                          std::to_string(beta));
    try {
        train.validate();
    } catch (const ConfigError& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    if (classes < 2) throw ConfigError("config: field 'train.classes' must be >= 2");
    if (train_samples < 1) throw ConfigError("config: field 'train.train_samples' must be >= 1");
    if (data_dir.empty() || checkpoint_dir.empty() || report_dir.empty())
        throw ConfigError("config: paths must be non-empty");
}

RunConfig parse_run_config(const std::string& text) {
    RunConfig cfg;
    std::istringstream is(text);
    std::string line, section;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw ConfigError("config: malformed section header at line " +
                                  std::to_string(lineno));
            section = trim(line.substr(1, line.size() - 2));
            if (section != "model" && section != "prompt" && section != "train" &&
                section != "paths")
                throw ConfigError("config: unknown section '" + section + "'");
            continue;
        }
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config: expected 'key = value' at line " + std::to_string(lineno));
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty() || value.empty())
            throw ConfigError("config: empty key or value at line " + std::to_string(lineno));
        const std::string qual = section.empty() ? key : section + "." + key;

        if (section == "model") {
            if (key == "image") {
                cfg.model.image_h = cfg.model.image_w = parse_size(qual, value);
            } else if (key == "channels") {
                cfg.model.channels = parse_size(qual, value);
            } else if (key == "patch") {
                cfg.model.patch = parse_size(qual, value);
            } else if (key == "d") {
                cfg.model.d = parse_size(qual, value);
            } else if (key == "d_ff") {
                cfg.model.d_ff = parse_size(qual, value);
            } else if (key == "blocks") {
                cfg.model.blocks = parse_size(qual, value);
            } else if (key == "k") {
                cfg.model.k = parse_size(qual, value);
            } else if (key == "freeze_topology") {
                cfg.model.freeze_topology = parse_bool(qual, value);
            } else {
                throw ConfigError("config: unknown field '" + qual + "'");
            }
        } else if (section == "prompt") {
            if (key == "m") {
                cfg.prompt_m = parse_size(qual, value);
            } else if (key == "r") {
                cfg.prompt_r = parse_size(qual, value);
            } else if (key == "alpha") {
                cfg.alpha = parse_real(qual, value);
            } else if (key == "beta") {
                cfg.beta = parse_real(qual, value);
            } else {
                throw ConfigError("config: unknown field '" + qual + "'");
            }
        } else if (section == "train") {
            if (key == "lr") {
                cfg.train.lr = parse_real(qual, value);
            } else if (key == "weight_decay") {
                cfg.train.weight_decay = parse_real(qual, value);
            } else if (key == "epochs") {
                cfg.train.epochs = parse_size(qual, value);
            } else if (key == "schedule") {
                cfg.train.schedule = value;
            } else if (key == "batch_size") {
                cfg.train.batch_size = parse_size(qual, value);
            } else if (key == "seed") {
                cfg.train.seed = parse_size(qual, value);
            } else if (key == "grad_clip") {
                cfg.train.grad_clip = parse_bool(qual, value);
            } else if (key == "clip_norm") {
                cfg.train.clip_norm = parse_real(qual, value);
            } else if (key == "classes") {
                cfg.classes = parse_size(qual, value);
            } else if (key == "train_samples") {
                cfg.train_samples = parse_size(qual, value);
            } else if (key == "val_samples") {
                cfg.val_samples = parse_size(qual, value);
            } else {
                throw ConfigError("config: unknown field '" + qual + "'");
            }
        } else if (section == "paths") {
            if (key == "data_dir") {
                cfg.data_dir = value;
            } else if (key == "checkpoint_dir") {
                cfg.checkpoint_dir = value;
            } else if (key == "report_dir") {
                cfg.report_dir = value;
            } else {
                throw ConfigError("config: unknown field '" + qual + "'");
            }
        } else {
            throw ConfigError("config: field '" + qual + "' outside any section");
        }
    }
    cfg.validate();
    return cfg;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("config: cannot open '" + path + "'");
    std::stringstream buffer;
    buffer << is.rdbuf();
    return parse_run_config(buffer.str());
}

std::string default_config_text() {
    return R"([model]
image = 32
channels = 1
patch = 8
d = 48
d_ff = 96
blocks = 2
k = 5
freeze_topology = false

[prompt]
m = 4
r = 32
alpha = 0.2
beta = 0.2

[train]
lr = 0.01
weight_decay = 0.05
epochs = 20
schedule = cosine
batch_size = 16
seed = 7
classes = 2
train_samples = 64
val_samples = 128

[paths]
data_dir = data
checkpoint_dir = checkpoints
report_dir = reports
)";
}

}  // namespace vgp
