#include "ribsr/report.hpp"

#include <cstdio>
#include <sstream>

#include "ribsr/common.hpp"

namespace ribsr {

Record& Record::put(const std::string& key, const std::string& value) {
    if (key.find_first_of(" =") != std::string::npos ||
        value.find_first_of(" =") != std::string::npos)
        throw ContractError("record fields may not contain spaces or '='");
    fields_.emplace_back(key, value);
    return *this;
}

Record& Record::put(const std::string& key, std::int64_t value) {
    return put(key, std::to_string(value));
}

Record& Record::put(const std::string& key, double value) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.9g", value);
    return put(key, std::string(buf));
}

std::string Record::line() const {
    std::ostringstream os;
    for (std::size_t i = 0; i < fields_.size(); ++i) {
        if (i) os << " ";
        os << fields_[i].first << "=" << fields_[i].second;
    }
    return os.str();
}

Record Record::parse(const std::string& line) {
    Record r;
    std::istringstream is(line);
    std::string tok;
    while (is >> tok) {
        const auto eq = tok.find('=');
        if (eq == std::string::npos) throw FormatError("record token without '=': " + tok);
        r.fields_.emplace_back(tok.substr(0, eq), tok.substr(eq + 1));
    }
    return r;
}

std::string Record::get(const std::string& key) const {
    for (const auto& [k, v] : fields_)
        if (k == key) return v;
    return std::string();
}

}  // namespace ribsr
