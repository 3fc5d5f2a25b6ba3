#include "latentmark/io/config.hpp"

#include <algorithm>
#include <cctype>
#include <sstream>
#include <stdexcept>

#include "latentmark/io/container.hpp"

namespace latentmark::io {

namespace {

std::string trim(const std::string& s) {
    size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

// Strips a trailing comment that is not inside a string literal.
std::string strip_comment(const std::string& line) {
    bool in_string = false;
    for (size_t i = 0; i < line.size(); ++i) {
        if (line[i] == '"') in_string = !in_string;
        if (line[i] == '#' && !in_string) return line.substr(0, i);
    }
    return line;
}

ConfigValue parse_scalar(const std::string& raw, int line_no) {
    ConfigValue v;
    const std::string t = trim(raw);
    if (t.empty()) throw std::runtime_error("config line " + std::to_string(line_no) + ": empty value");
    if (t.front() == '"') {
        if (t.size() < 2 || t.back() != '"')
            throw std::runtime_error("config line " + std::to_string(line_no) +
                                     ": unterminated string");
        v.kind = ConfigValue::Kind::string;
        v.s = t.substr(1, t.size() - 2);
        return v;
    }
    if (t == "true" || t == "false") {
        v.kind = ConfigValue::Kind::boolean;
        v.b = t == "true";
        return v;
    }
    // integer or float
    try {
        size_t pos = 0;
        if (t.find_first_of(".eE") == std::string::npos) {
            v.kind = ConfigValue::Kind::integer;
            v.i = std::stoll(t, &pos);
            if (pos == t.size()) return v;
        }
        v.kind = ConfigValue::Kind::real;
        v.d = std::stod(t, &pos);
        if (pos == t.size()) return v;
    } catch (...) {
    }
    throw std::runtime_error("config line " + std::to_string(line_no) + ": cannot parse value '" +
                             t + "'");
}

ConfigValue parse_value(const std::string& raw, int line_no) {
    const std::string t = trim(raw);
    if (!t.empty() && t.front() == '[') {
        if (t.back() != ']')
            throw std::runtime_error("config line " + std::to_string(line_no) +
                                     ": unterminated array");
        ConfigValue v;
        v.kind = ConfigValue::Kind::array;
        std::string inner = t.substr(1, t.size() - 2);
        // split on commas outside strings
        std::vector<std::string> parts;
        std::string cur;
        bool in_string = false;
        for (char c : inner) {
            if (c == '"') in_string = !in_string;
            if (c == ',' && !in_string) {
                parts.push_back(cur);
                cur.clear();
            } else {
                cur.push_back(c);
            }
        }
        if (!trim(cur).empty() || !parts.empty()) parts.push_back(cur);
        for (const auto& p : parts)
            if (!trim(p).empty()) v.items.push_back(parse_scalar(p, line_no));
        return v;
    }
    return parse_scalar(t, line_no);
}

}  // namespace

std::string ConfigValue::render() const {
    std::ostringstream os;
    switch (kind) {
        case Kind::string: os << '"' << s << '"'; break;
        case Kind::integer: os << i; break;
        case Kind::real: {
            os.precision(17);
            os << d;
            break;
        }
        case Kind::boolean: os << (b ? "true" : "false"); break;
        case Kind::array: {
            os << '[';
            for (size_t j = 0; j < items.size(); ++j) {
                if (j) os << ", ";
                os << items[j].render();
            }
            os << ']';
            break;
        }
    }
    return os.str();
}

ConfigDoc ConfigDoc::parse(const std::string& text) {
    ConfigDoc doc;
    std::istringstream in(text);
    std::string line, section;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        line = trim(strip_comment(line));
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw std::runtime_error("config line " + std::to_string(line_no) +
                                         ": malformed section header");
            section = trim(line.substr(1, line.size() - 2));
            if (section.empty())
                throw std::runtime_error("config line " + std::to_string(line_no) +
                                         ": empty section name");
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error("config line " + std::to_string(line_no) +
                                     ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        if (key.empty())
            throw std::runtime_error("config line " + std::to_string(line_no) + ": empty key");
        const std::string dotted = section.empty() ? key : section + "." + key;
        if (doc.values_.count(dotted))
            throw std::runtime_error("config line " + std::to_string(line_no) +
                                     ": duplicate key " + dotted);
        doc.values_[dotted] = parse_value(line.substr(eq + 1), line_no);
    }
    return doc;
}

ConfigDoc ConfigDoc::parse_file(const std::string& path) {
    return parse(read_text_file(path));
}

int64_t ConfigDoc::get_int(const std::string& key, int64_t fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    if (it->second.kind != ConfigValue::Kind::integer)
        throw std::runtime_error("config: " + key + " must be an integer");
    return it->second.i;
}

double ConfigDoc::get_double(const std::string& key, double fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    if (it->second.kind == ConfigValue::Kind::integer) return double(it->second.i);
    if (it->second.kind != ConfigValue::Kind::real)
        throw std::runtime_error("config: " + key + " must be a number");
    return it->second.d;
}

bool ConfigDoc::get_bool(const std::string& key, bool fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    if (it->second.kind != ConfigValue::Kind::boolean)
        throw std::runtime_error("config: " + key + " must be a boolean");
    return it->second.b;
}

std::string ConfigDoc::get_string(const std::string& key, const std::string& fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    if (it->second.kind != ConfigValue::Kind::string)
        throw std::runtime_error("config: " + key + " must be a string");
    return it->second.s;
}

std::vector<std::string> ConfigDoc::get_string_array(const std::string& key,
                                                     std::vector<std::string> fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    if (it->second.kind != ConfigValue::Kind::array)
        throw std::runtime_error("config: " + key + " must be an array");
    std::vector<std::string> out;
    for (const auto& v : it->second.items) {
        if (v.kind != ConfigValue::Kind::string)
            throw std::runtime_error("config: " + key + " must contain strings");
        out.push_back(v.s);
    }
    return out;
}

std::vector<double> ConfigDoc::get_double_array(const std::string& key,
                                                std::vector<double> fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    if (it->second.kind != ConfigValue::Kind::array)
        throw std::runtime_error("config: " + key + " must be an array");
    std::vector<double> out;
    for (const auto& v : it->second.items) {
        if (v.kind == ConfigValue::Kind::integer) out.push_back(double(v.i));
        else if (v.kind == ConfigValue::Kind::real) out.push_back(v.d);
        else throw std::runtime_error("config: " + key + " must contain numbers");
    }
    return out;
}

void ConfigDoc::set_int(const std::string& key, int64_t v) {
    ConfigValue cv;
    cv.kind = ConfigValue::Kind::integer;
    cv.i = v;
    values_[key] = cv;
}
void ConfigDoc::set_double(const std::string& key, double v) {
    ConfigValue cv;
    cv.kind = ConfigValue::Kind::real;
    cv.d = v;
    values_[key] = cv;
}
void ConfigDoc::set_bool(const std::string& key, bool v) {
    ConfigValue cv;
    cv.kind = ConfigValue::Kind::boolean;
    cv.b = v;
    values_[key] = cv;
}
void ConfigDoc::set_string(const std::string& key, const std::string& v) {
    ConfigValue cv;
    cv.kind = ConfigValue::Kind::string;
    cv.s = v;
    values_[key] = cv;
}

void ConfigDoc::merge_over(const ConfigDoc& other) {
    for (const auto& [key, value] : other.values_) values_[key] = value;
}

void ConfigDoc::require_known_keys(const std::vector<std::string>& allowed) const {
    for (const auto& [key, value] : values_) {
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
            throw std::runtime_error("config: unknown key '" + key + "'");
    }
}

std::string ConfigDoc::dump() const {
    // group by section for readability
    std::map<std::string, std::vector<std::pair<std::string, const ConfigValue*>>> sections;
    for (const auto& [key, value] : values_) {
        const auto dot = key.rfind('.');
        const std::string section = dot == std::string::npos ? "" : key.substr(0, dot);
        const std::string name = dot == std::string::npos ? key : key.substr(dot + 1);
        sections[section].push_back({name, &value});
    }
    std::ostringstream os;
    for (const auto& [section, entries] : sections) {
        if (!section.empty()) os << "[" << section << "]\n";
        for (const auto& [name, value] : entries) os << name << " = " << value->render() << "\n";
        os << "\n";
    }
    return os.str();
}

}  // namespace latentmark::io
