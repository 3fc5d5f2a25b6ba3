#pragma once

#include <map>
#include <string>
#include <vector>

namespace latentmark::io {

// Minimal strict TOML subset: [section] / [section.sub] headers, scalar and
// flat-array values, '#' comments. Enough for run configuration files; keys
// are exposed dotted ("codec.epochs").
struct ConfigValue {
    enum class Kind { string, integer, real, boolean, array };
    Kind kind = Kind::string;
    std::string s;
    int64_t i = 0;
    double d = 0;
    bool b = false;
    std::vector<ConfigValue> items;

    std::string render() const;
};

class ConfigDoc {
public:
    static ConfigDoc parse(const std::string& text);
    static ConfigDoc parse_file(const std::string& path);

    bool has(const std::string& key) const { return values_.count(key) > 0; }
    int64_t get_int(const std::string& key, int64_t fallback) const;
    double get_double(const std::string& key, double fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;
    std::string get_string(const std::string& key, const std::string& fallback) const;
    std::vector<std::string> get_string_array(const std::string& key,
                                              std::vector<std::string> fallback) const;
    std::vector<double> get_double_array(const std::string& key,
                                         std::vector<double> fallback) const;

    void set_int(const std::string& key, int64_t v);
    void set_double(const std::string& key, double v);
    void set_bool(const std::string& key, bool v);
    void set_string(const std::string& key, const std::string& v);
    // Copies every value of `other` over this document.
    void merge_over(const ConfigDoc& other);

    // Rejects keys (and their sections) outside the allowed set.
    void require_known_keys(const std::vector<std::string>& allowed) const;

    // Serializes back to sectioned TOML text.
    std::string dump() const;

    const std::map<std::string, ConfigValue>& values() const { return values_; }

private:
    std::map<std::string, ConfigValue> values_;
};

}  // namespace latentmark::io
