#include "consentgate/channels.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>

#include "consentgate/crypto.hpp"
#include "consentgate/error.hpp"

namespace consentgate {

void to_json(Json& j, const ConsentPrompt& p) {
  j = Json{{"request_id", p.request_id},
           {"patient_display", p.patient_display},
           {"requester_display", p.requester_display},
           {"purpose", p.purpose},
           {"sections", sections_to_json(p.sections)},
           {"action", p.action},
           {"expires_at", format_iso8601(p.expires_at)}};
}

void to_json(Json& j, const ResponseProof& p) {
  j = Json{{"kind", p.kind}, {"payload", p.payload}, {"device_id", p.device_id}};
}

void from_json(const Json& j, ResponseProof& p) {
  p.kind = j.at("kind").get<ProofKind>();
  p.payload = j.at("payload").get<std::string>();
  p.device_id = j.at("device_id").get<std::string>();
}

ProofKind proof_kind_for(DeviceKind kind) noexcept {
  switch (kind) {
    case DeviceKind::smartphone_push: return ProofKind::push_signed;
    case DeviceKind::sms: return ProofKind::sms_reply_code;
    case DeviceKind::voice_call:
    case DeviceKind::landline_voice: return ProofKind::voice_keypress;
    case DeviceKind::hardware_token: return ProofKind::otp_code;
  }
  return ProofKind::otp_code;
}

bool uses_passcode(DeviceKind kind) noexcept { return kind != DeviceKind::smartphone_push; }

std::vector<Device> with_device_linked(const std::vector<Device>& devices, const Device& device) {
  if (device.device_id.empty()) throw Error(ErrorCode::InvalidArgument, "empty device id");
  if (device.priority < 1) throw Error(ErrorCode::InvalidArgument, "priority must be >= 1");
  for (const auto& d : devices) {
    if (d.device_id == device.device_id) throw Error(ErrorCode::DuplicateDevice, device.device_id);
    if (d.priority == device.priority) {
      throw Error(ErrorCode::DuplicatePriority, std::to_string(device.priority));
    }
  }
  auto out = devices;
  out.push_back(device);
  std::sort(out.begin(), out.end(),
            [](const Device& a, const Device& b) { return a.priority < b.priority; });
  return out;
}

std::vector<Device> without_device(const std::vector<Device>& devices,
                                   const std::string& device_id) {
  auto out = devices;
  const auto it = std::find_if(out.begin(), out.end(),
                               [&](const Device& d) { return d.device_id == device_id; });
  if (it == out.end()) throw Error(ErrorCode::UnknownDevice, device_id);
  out.erase(it);
  return out;
}

// --- passcodes -------------------------------------------------------------

Passcode PasscodeBook::issue_passcode(const std::string& request_id, EpochMs now) {
  char buf[8];
  std::snprintf(buf, sizeof buf, "%06u", crypto::random_below(1'000'000));
  Passcode code{buf, request_id, now, ttl_ms_, false};
  {
    std::lock_guard lock(mu_);
    live_[request_id] = code;
  }
  if (changed_) changed_();
  return code;
}

bool PasscodeBook::verify_passcode(const std::string& request_id, std::string_view code,
                                   EpochMs now) {
  bool ok = false;
  {
    std::lock_guard lock(mu_);
    const auto it = live_.find(request_id);
    if (it != live_.end()) {
      auto& pc = it->second;
      ok = !pc.consumed && now < pc.issued_at + pc.ttl_ms &&
           crypto::constant_time_equal(pc.code, code);
      if (ok) pc.consumed = true;
    }
  }
  if (ok && changed_) changed_();
  return ok;
}

Json PasscodeBook::to_json() const {
  std::lock_guard lock(mu_);
  Json out = Json::object();
  for (const auto& [id, pc] : live_) {
    out[id] = {{"code", pc.code},
               {"issued_at", pc.issued_at},
               {"ttl_ms", pc.ttl_ms},
               {"consumed", pc.consumed}};
  }
  return out;
}

void PasscodeBook::from_json(const Json& j) {
  std::lock_guard lock(mu_);
  live_.clear();
  for (const auto& [id, pc] : j.items()) {
    live_[id] = {pc.at("code").get<std::string>(), id, pc.at("issued_at").get<EpochMs>(),
                 pc.at("ttl_ms").get<DurationMs>(), pc.at("consumed").get<bool>()};
  }
}

// --- keys and proofs -------------------------------------------------------

std::vector<std::uint8_t> EnrollmentKeys::generate(const std::string& owner,
                                                   const std::string& device_id) {
  auto key = crypto::random_bytes(32);
  {
    std::lock_guard lock(mu_);
    keys_[{owner, device_id}] = key;
  }
  if (changed_) changed_();
  return key;
}

std::optional<std::vector<std::uint8_t>> EnrollmentKeys::find(const std::string& owner,
                                                               const std::string& device_id) const {
  std::lock_guard lock(mu_);
  const auto it = keys_.find({owner, device_id});
  if (it == keys_.end()) return std::nullopt;
  return it->second;
}

void EnrollmentKeys::erase(const std::string& owner, const std::string& device_id) {
  {
    std::lock_guard lock(mu_);
    keys_.erase({owner, device_id});
  }
  if (changed_) changed_();
}

Json EnrollmentKeys::to_json() const {
  std::lock_guard lock(mu_);
  Json out = Json::array();
  for (const auto& [k, key] : keys_) {
    out.push_back({{"owner", k.first}, {"device_id", k.second}, {"key", crypto::to_hex(key)}});
  }
  return out;
}

void EnrollmentKeys::from_json(const Json& j) {
  std::lock_guard lock(mu_);
  keys_.clear();
  for (const auto& item : j) {
    keys_[{item.at("owner").get<std::string>(), item.at("device_id").get<std::string>()}] =
        crypto::from_hex(item.at("key").get<std::string>());
  }
}

namespace {

std::string push_mac(const std::vector<std::uint8_t>& key, std::string_view request_id,
                     std::string_view device_id, Decision decision) {
  std::string message;
  message.append(request_id).append("\n").append(device_id).append("\n").append(to_string(decision));
  return crypto::hmac_sha256_hex(key, message);
}

}  // namespace

std::string sign_push_response(const std::vector<std::uint8_t>& key, std::string_view request_id,
                               std::string_view device_id, Decision decision) {
  return std::string(to_string(decision)) + "." + push_mac(key, request_id, device_id, decision);
}

bool ProofVerifier::verify_proof(const ResponseProof& proof, const std::string& request_id,
                                 const std::string& owner, Decision decision, EpochMs now) {
  const std::string fingerprint = crypto::sha256_hex(
      request_id + "\n" + std::string(to_string(proof.kind)) + "\n" + proof.device_id + "\n" +
      proof.payload);
  {
    std::lock_guard lock(mu_);
    if (consumed_.contains(fingerprint)) return false;
  }

  bool ok = false;
  if (proof.kind == ProofKind::push_signed) {
    const auto key = keys_.find(owner, proof.device_id);
    if (key) {
      // Compare the whole payload as text: hex is canonical lowercase, so a
      // case-flipped digit is a different (invalid) proof.
      const std::string expected = sign_push_response(*key, request_id, proof.device_id, decision);
      ok = crypto::constant_time_equal(expected, proof.payload);
    }
    if (ok) {
      std::lock_guard lock(mu_);
      ok = consumed_.insert(fingerprint).second;
    }
  } else {
    ok = passcodes_.verify_passcode(request_id, proof.payload, now);
    if (ok) {
      std::lock_guard lock(mu_);
      consumed_.insert(fingerprint);
    }
  }
  if (ok && changed_) changed_();
  return ok;
}

Json ProofVerifier::to_json() const {
  std::lock_guard lock(mu_);
  return Json(consumed_);
}

void ProofVerifier::from_json(const Json& j) {
  std::lock_guard lock(mu_);
  consumed_ = j.get<std::set<std::string>>();
}

// --- transports ------------------------------------------------------------

bool SimulatedTransport::deliver(const ConsentPrompt&, const Device&) {
  std::lock_guard lock(mu_);
  if (down_) return false;
  if (fail_next_ > 0) {
    --fail_next_;
    return false;
  }
  if (failure_rate_ > 0.0) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    if (u(rng_) < failure_rate_) return false;
  }
  ++delivered_;
  return true;
}

void SimulatedTransport::set_failure_rate(double rate, std::uint64_t seed) {
  std::lock_guard lock(mu_);
  failure_rate_ = rate;
  rng_.seed(seed);
}

void SimulatedTransport::fail_next(int n) {
  std::lock_guard lock(mu_);
  fail_next_ = n;
}

void SimulatedTransport::set_down(bool down) {
  std::lock_guard lock(mu_);
  down_ = down;
}

std::size_t SimulatedTransport::delivered_count() const {
  std::lock_guard lock(mu_);
  return delivered_;
}

void to_json(Json& j, const OutboxEntry& e) {
  j = Json{{"request_id", e.request_id},
           {"device_id", e.device_id},
           {"kind", e.kind},
           {"attempt", e.attempt},
           {"sent_at", format_iso8601(e.sent_at)}};
}

void from_json(const Json& j, OutboxEntry& e) {
  e.request_id = j.at("request_id").get<std::string>();
  e.device_id = j.at("device_id").get<std::string>();
  e.kind = j.at("kind").get<DeviceKind>();
  e.attempt = j.at("attempt").get<int>();
  e.sent_at = parse_iso8601(j.at("sent_at").get<std::string>());
}

ChannelHub::ChannelHub() {
  for (auto kind : all_values<DeviceKind>()) {
    auto t = std::make_shared<SimulatedTransport>();
    simulated_[kind] = t;
    transports_[kind] = t;
  }
}

DeliveryReceipt ChannelHub::dispatch(const ConsentPrompt& prompt, const std::string& owner,
                                     const Device& device, int attempt,
                                     const std::optional<std::string>& passcode, EpochMs now) {
  std::shared_ptr<Transport> transport;
  {
    std::lock_guard lock(mu_);
    transport = transports_.at(device.kind);
  }
  if (!transport->deliver(prompt, device)) {
    throw Error(ErrorCode::TransportUnavailable, device.device_id);
  }
  OutboxEntry entry{prompt.request_id, device.device_id, device.kind, attempt, now};
  std::lock_guard lock(mu_);
  if (!outbox_path_.empty()) {
    std::ofstream out(outbox_path_, std::ios::app | std::ios::binary);
    out << Json(entry).dump() << '\n';
  }
  outbox_.push_back(entry);
  inboxes_[{owner, device.device_id}].push_back(
      InboxMessage{prompt, owner, device.device_id, device.kind, passcode, attempt, now});
  return {true, now};
}

void ChannelHub::set_transport(DeviceKind kind, std::shared_ptr<Transport> transport) {
  std::lock_guard lock(mu_);
  transports_[kind] = std::move(transport);
}

SimulatedTransport& ChannelHub::simulated(DeviceKind kind) {
  std::lock_guard lock(mu_);
  return *simulated_.at(kind);
}

void ChannelHub::set_outbox_path(std::string path) {
  std::lock_guard lock(mu_);
  outbox_path_ = std::move(path);
}

std::vector<OutboxEntry> ChannelHub::outbox() const {
  std::lock_guard lock(mu_);
  return outbox_;
}

std::vector<InboxMessage> ChannelHub::inbox(const std::string& owner,
                                            const std::string& device_id) const {
  std::lock_guard lock(mu_);
  const auto it = inboxes_.find({owner, device_id});
  if (it == inboxes_.end()) return {};
  return it->second;
}

std::optional<InboxMessage> ChannelHub::latest(const std::string& owner,
                                               const std::string& device_id,
                                               const std::string& request_id) const {
  std::lock_guard lock(mu_);
  const auto it = inboxes_.find({owner, device_id});
  if (it == inboxes_.end()) return std::nullopt;
  for (auto m = it->second.rbegin(); m != it->second.rend(); ++m) {
    if (m->prompt.request_id == request_id) return *m;
  }
  return std::nullopt;
}

std::vector<std::string> ChannelHub::serialized_prompts() const {
  std::lock_guard lock(mu_);
  std::vector<std::string> out;
  for (const auto& [key, messages] : inboxes_) {
    for (const auto& m : messages) out.push_back(Json(m.prompt).dump());
  }
  return out;
}

void ChannelHub::enroll(const std::string& owner, const std::string& device_id,
                        std::vector<std::uint8_t> key) {
  std::lock_guard lock(mu_);
  device_keys_[{owner, device_id}] = std::move(key);
}

std::optional<std::vector<std::uint8_t>> ChannelHub::device_key(const std::string& owner,
                                                                const std::string& device_id) const {
  std::lock_guard lock(mu_);
  const auto it = device_keys_.find({owner, device_id});
  if (it == device_keys_.end()) return std::nullopt;
  return it->second;
}

}  // namespace consentgate
