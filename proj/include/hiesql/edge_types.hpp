#pragma once

#include <array>
#include <cstdint>
#include <string_view>

#include "hiesql/util.hpp"

namespace hiesql {

// Closed enumeration of relation types. The integer ids are part of the
// checkpoint format (they index the relation embedding table); append only.
enum class EdgeType : std::uint8_t {
  Default = 0,
  Identity,
  // schema-internal
  CCSameTable,
  CCForeignKey,
  CCForeignKeyRev,
  CTMember,
  TCMember,
  CTPrimaryKey,
  TCPrimaryKey,
  TTForeignKey,
  TTForeignKeyRev,
  TTForeignKeyBoth,
  // current utterance <-> schema
  UCExact,
  CUExact,
  UCPartial,
  CUPartial,
  UCValue,
  CUValue,
  UTExact,
  TUExact,
  UTPartial,
  TUPartial,
  // history utterances <-> schema
  HCExact,
  CHExact,
  HCPartial,
  CHPartial,
  HCValue,
  CHValue,
  HTExact,
  THExact,
  HTPartial,
  THPartial,
  // last SQL query <-> schema
  SCEqual,
  CSEqual,
  SCUnequal,
  CSUnequal,
  STEqual,
  TSEqual,
  STUnequal,
  TSUnequal,
  Count_
};

inline constexpr int kEdgeTypeCount = static_cast<int>(EdgeType::Count_);

inline constexpr int edge_id(EdgeType t) { return static_cast<int>(t); }

inline constexpr std::array<std::string_view, kEdgeTypeCount> kEdgeNames = {
    "default",   "identity",  "C-C-same-table", "C-C-FK",   "C-C-FK-rev", "C-T-member", "T-C-member",
    "C-T-PK",    "T-C-PK",    "T-T-FK",         "T-T-FK-rev", "T-T-FK-both",
    "U-C-EM",    "C-U-EM",    "U-C-PM",         "C-U-PM",   "U-C-VM",     "C-U-VM",     "U-T-EM",
    "T-U-EM",    "U-T-PM",    "T-U-PM",
    "H-C-EM",    "C-H-EM",    "H-C-PM",         "C-H-PM",   "H-C-VM",     "C-H-VM",     "H-T-EM",
    "T-H-EM",    "H-T-PM",    "T-H-PM",
    "S-C-EC",    "C-S-EC",    "S-C-UC",         "C-S-UC",   "S-T-ET",     "T-S-ET",     "S-T-UT",
    "T-S-UT"};

inline constexpr std::string_view edge_name(EdgeType t) { return kEdgeNames[static_cast<std::size_t>(t)]; }

inline EdgeType edge_from_name(std::string_view name) {
  for (int i = 0; i < kEdgeTypeCount; ++i)
    if (kEdgeNames[static_cast<std::size_t>(i)] == name) return static_cast<EdgeType>(i);
  fail("unknown edge type '", name, "'");
}

// Type of the reverse edge. Symmetric types are their own inverse.
inline constexpr EdgeType inverse(EdgeType t) {
  switch (t) {
    case EdgeType::Default:
    case EdgeType::Identity:
    case EdgeType::CCSameTable:
    case EdgeType::TTForeignKeyBoth:
    case EdgeType::Count_:
      return t;
    case EdgeType::CCForeignKey: return EdgeType::CCForeignKeyRev;
    case EdgeType::CCForeignKeyRev: return EdgeType::CCForeignKey;
    case EdgeType::TTForeignKey: return EdgeType::TTForeignKeyRev;
    case EdgeType::TTForeignKeyRev: return EdgeType::TTForeignKey;
    default: break;
  }
  // Remaining directed types come in adjacent (forward, reverse) pairs.
  const int id = edge_id(t);
  const int base = id >= edge_id(EdgeType::UCExact) ? edge_id(EdgeType::UCExact) : edge_id(EdgeType::CTMember);
  return static_cast<EdgeType>(((id - base) % 2 == 0) ? id + 1 : id - 1);
}

// Higher wins when two match types compete for the same ordered node pair.
inline constexpr int precedence(EdgeType t) {
  switch (t) {
    case EdgeType::UCExact: case EdgeType::CUExact: case EdgeType::UTExact: case EdgeType::TUExact:
    case EdgeType::HCExact: case EdgeType::CHExact: case EdgeType::HTExact: case EdgeType::THExact:
    case EdgeType::SCEqual: case EdgeType::CSEqual: case EdgeType::STEqual: case EdgeType::TSEqual:
      return 3;
    case EdgeType::UCValue: case EdgeType::CUValue: case EdgeType::HCValue: case EdgeType::CHValue:
      return 2;
    case EdgeType::Default:
      return 0;
    default:
      return 1;
  }
}

}  // namespace hiesql
