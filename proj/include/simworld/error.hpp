#pragma once

#include <stdexcept>
#include <string>

namespace simworld {

// Every recoverable failure carries a stable machine-readable code; the
// protocol layer forwards it verbatim as error.code.
class SimError : public std::runtime_error {
public:
    SimError(std::string code, const std::string& what)
        : std::runtime_error(what), code_(std::move(code)) {}
    const std::string& code() const noexcept { return code_; }

private:
    std::string code_;
};

namespace err {
inline constexpr const char* DuplicateId = "DuplicateId";
inline constexpr const char* NotFound = "NotFound";
inline constexpr const char* NoFreeSpace = "NoFreeSpace";
inline constexpr const char* OutOfExtent = "OutOfExtent";
inline constexpr const char* ConfigInvalid = "ConfigInvalid";
inline constexpr const char* NoPath = "NoPath";
inline constexpr const char* InsufficientSpace = "InsufficientSpace";
inline constexpr const char* ScenarioInvalid = "ScenarioInvalid";
inline constexpr const char* UnknownAgent = "UnknownAgent";
inline constexpr const char* MalformedAction = "MalformedAction";
inline constexpr const char* Busy = "busy";
inline constexpr const char* WrongEmbodiment = "WrongEmbodiment";
inline constexpr const char* WrongState = "WrongState";
inline constexpr const char* OutOfRange = "OutOfRange";
inline constexpr const char* InvalidTarget = "InvalidTarget";
inline constexpr const char* UnparseableClause = "UnparseableClause";
inline constexpr const char* TargetNotFound = "TargetNotFound";
inline constexpr const char* EndpointUnavailable = "EndpointUnavailable";
inline constexpr const char* InsufficientFunds = "InsufficientFunds";
inline constexpr const char* InfeasibleMap = "InfeasibleMap";
}  // namespace err

[[noreturn]] inline void fail(const char* code, const std::string& msg) {
    throw SimError(code, msg);
}

}  // namespace simworld
