#pragma once

// JSON mapping for the domain types. Timestamps are ISO-8601 UTC strings on
// the wire and in every file; enums use their lowercase/CamelCase names.

#include <nlohmann/json.hpp>

#include "consentgate/clock.hpp"
#include "consentgate/domain.hpp"

namespace consentgate {

using Json = nlohmann::json;

template <typename E>
  requires requires { EnumNames<E>::names; }
void to_json(Json& j, E value) {
  j = std::string(to_string(value));
}

template <typename E>
  requires requires { EnumNames<E>::names; }
void from_json(const Json& j, E& value) {
  value = parse_enum_or_throw<E>(j.get<std::string>());
}

void to_json(Json& j, const Device& d);
void from_json(const Json& j, Device& d);

void to_json(Json& j, const Principal& p);
void from_json(const Json& j, Principal& p);

void to_json(Json& j, const Patient& p);
void from_json(const Json& j, Patient& p);

void to_json(Json& j, const AccessRequest& r);
void from_json(const Json& j, AccessRequest& r);

void to_json(Json& j, const HistoryEntry& h);
void from_json(const Json& j, HistoryEntry& h);

void to_json(Json& j, const ConsentCase& c);
void from_json(const Json& j, ConsentCase& c);

void to_json(Json& j, const Grant& g);
void from_json(const Json& j, Grant& g);

void to_json(Json& j, const Delegation& d);
void from_json(const Json& j, Delegation& d);

void to_json(Json& j, const DecisionRecord& d);
void from_json(const Json& j, DecisionRecord& d);

Json sections_to_json(const SectionSet& sections);
SectionSet sections_from_json(const Json& j);

/// Reads a whole file. Throws Error(NotFound) when it cannot be opened.
std::string read_file(const std::string& path);

/// Writes via a temporary file, fsync and rename so readers never see a
/// partially written file.
void write_file_atomic(const std::string& path, const std::string& contents);

}  // namespace consentgate
