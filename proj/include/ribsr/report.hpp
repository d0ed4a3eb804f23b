#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace ribsr {

// Line-delimited report records: one record per line, space-separated
// key=value pairs, keys in insertion order. Values never contain spaces
// (numbers and short identifiers only), so the format round-trips with a
// trivial split. Diff-able and language-neutral.

class Record {
public:
    Record& put(const std::string& key, const std::string& value);
    Record& put(const std::string& key, std::int64_t value);
    Record& put(const std::string& key, double value);

    std::string line() const;
    const std::vector<std::pair<std::string, std::string>>& fields() const { return fields_; }

    static Record parse(const std::string& line);
    std::string get(const std::string& key) const;  // empty if absent

private:
    std::vector<std::pair<std::string, std::string>> fields_;
};

}  // namespace ribsr
