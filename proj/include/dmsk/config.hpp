#pragma once

// key=value configuration with a fixed key set. Unknown keys are rejected;
// every key has a default. The effective config is echoed into the header of
// every text artifact the CLI writes.

#include <map>
#include <string>
#include <vector>

namespace dmsk {

class Config {
public:
    Config();

    static Config load(const std::string& path);
    void apply_file(const std::string& path);
    void set(const std::string& key, const std::string& value);
    bool has(const std::string& key) const { return values_.count(key) != 0; }

    float f(const std::string& key) const;
    int i(const std::string& key) const;
    const std::string& s(const std::string& key) const;

    // "# key=value\n" lines, keys sorted
    std::string echo(const std::string& line_prefix = "# ") const;

private:
    std::map<std::string, std::string> values_;
};

}  // namespace dmsk
