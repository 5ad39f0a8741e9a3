#pragma once

#include <atomic>
#include <condition_variable>
#include <deque>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "featguide/sampler.hpp"

namespace featguide {

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::filesystem::path storage_dir = "featguide-data";
  /// "toy" or a path to a profile JSON file.
  std::string backend_profile = "toy";
  std::size_t workers = 1;
};

/// Reads the keyed config file (JSON, optional) and applies FEATGUIDE_HOST,
/// FEATGUIDE_PORT, FEATGUIDE_STORAGE, FEATGUIDE_PROFILE and FEATGUIDE_WORKERS.
ServiceConfig load_service_config(const std::optional<std::filesystem::path>& path);

BackendProfile resolve_profile(const std::string& name_or_path);

/// Error carrying an HTTP status and, for 422, the offending field.
class ServiceError : public std::runtime_error {
 public:
  ServiceError(int status, std::string message, std::string field = {})
      : std::runtime_error(std::move(message)), status_(status), field_(std::move(field)) {}
  int status() const { return status_; }
  const std::string& field() const { return field_; }

 private:
  int status_;
  std::string field_;
};

enum class JobPhase { queued, inverting, sampling, done, failed, cancelled };
std::string_view to_string(JobPhase phase);
JobPhase job_phase_from(std::string_view name);
constexpr bool is_terminal(JobPhase p) {
  return p == JobPhase::done || p == JobPhase::failed || p == JobPhase::cancelled;
}

/// One server-sent event.
struct JobEvent {
  std::string type;  // phase | step | preview | done | failed | cancelled
  nlohmann::json data;
};

struct SubmitResult {
  std::string job_id;
  bool created = false;
};

/// Image, bank and edit-job store with a FIFO worker pool. Thread safe.
class JobService {
 public:
  JobService(ServiceConfig config, std::unique_ptr<Backend> backend);
  ~JobService();
  JobService(const JobService&) = delete;
  JobService& operator=(const JobService&) = delete;

  const Backend& backend() const { return *backend_; }

  /// Stores a PNG; the id is a content hash. Throws ServiceError(422) on bad images.
  nlohmann::json put_image(std::string_view png_bytes);
  std::string image_png(const std::string& image_id) const;

  /// {"v":1,"image_id":..,"ref_image_id":..?,"prompt":..?}; runs inversion when the bank is new.
  nlohmann::json create_bank(const nlohmann::json& request);
  nlohmann::json bank_info(const std::string& bank_id) const;

  /// {"v":1,"bank_id":..,"spec":{..},"config":{..}?}. Identical requests share one job id.
  SubmitResult submit_edit(const nlohmann::json& request);
  nlohmann::json job_status(const std::string& job_id) const;
  std::string job_result_png(const std::string& job_id) const;
  void cancel(const std::string& job_id);

  /// Events from index `from`; blocks up to `wait` for new ones. Sets `finished`
  /// once the terminal event has been returned.
  std::vector<JobEvent> events(const std::string& job_id, std::size_t from, std::chrono::milliseconds wait,
                               bool& finished) const;

  /// Blocks until the job reaches a terminal phase or the timeout elapses.
  JobPhase wait_for(const std::string& job_id, std::chrono::milliseconds timeout) const;

  /// Stops workers after their current step; queued jobs stay persisted.
  void shutdown();

 private:
  struct Job;
  struct Bank;

  std::filesystem::path image_path(const std::string& id) const;
  std::filesystem::path bank_dir(const std::string& id) const;
  std::filesystem::path job_dir(const std::string& id) const;

  std::shared_ptr<Job> find_job(const std::string& id) const;
  std::shared_ptr<const Bank> load_bank_cached(const std::string& id) const;
  void persist(const Job& job) const;
  void set_phase(Job& job, JobPhase phase);
  void push_event(Job& job, JobEvent event);
  void recover();
  void worker_loop();
  void execute(const std::shared_ptr<Job>& job);

  ServiceConfig config_;
  std::unique_ptr<Backend> backend_;

  mutable std::mutex mutex_;
  mutable std::condition_variable queue_cv_;
  std::map<std::string, std::shared_ptr<Job>> jobs_;
  std::deque<std::string> queue_;
  mutable std::map<std::string, std::shared_ptr<const Bank>> banks_;
  std::mutex bank_build_mutex_;
  bool stopping_ = false;
  std::vector<std::thread> workers_;
};

/// HTTP front end over a JobService.
class HttpServer {
 public:
  explicit HttpServer(JobService& service);
  ~HttpServer();

  /// Binds and serves on a background thread. Port 0 picks a free port; returns the bound port.
  int start(const std::string& host, int port);
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace featguide
