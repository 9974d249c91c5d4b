#include "protosim/service.hpp"
#include "protosim/backbone.hpp"
#include "protosim/ssl.hpp"
#include "support/fixtures.hpp"

#include <gtest/gtest.h>
#include <httplib.h>

#include <cstdlib>
#include <thread>

namespace protosim {
namespace {

namespace fs = std::filesystem;
using testing::ServiceFixture;
using testing::TempDir;
using nlohmann::json;

class ServiceTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir("svc");
    fixture_ = new ServiceFixture(testing::build_service_fixture(dir_->path()));
  }
  static void TearDownTestSuite() {
    delete fixture_;
    delete dir_;
  }

  InspectionService open(const fs::path& cache = {}) const {
    return InspectionService::open(fixture_->index_dir, fixture_->checkpoint, fixture_->report_dir / "report.json",
                                   cache);
  }

  static Response get(const InspectionService& s, const std::string& url) {
    const auto q = url.find('?');
    return s.handle("GET", url.substr(0, q), q == std::string::npos ? QueryParams{} : testing::parse_query(url.substr(q + 1)));
  }

  static TempDir* dir_;
  static ServiceFixture* fixture_;
};

TempDir* ServiceTest::dir_ = nullptr;
ServiceFixture* ServiceTest::fixture_ = nullptr;

TEST_F(ServiceTest, GoldenResponses) {
  const InspectionService s = open(dir_->path() / "cache");
  const fs::path golden = fs::path(PROTOSIM_GOLDEN_DIR) / "service";
  const bool update = std::getenv("UPDATE_GOLDEN") != nullptr;
  for (const auto& req : testing::golden_requests(*fixture_)) {
    const Response r = get(s, req.url);
    const std::string text = testing::describe_response(req.url, r.status, r.content_type, r.body);
    const fs::path file = golden / (req.name + ".golden");
    if (update) {
      testing::write_text(file, text);
      continue;
    }
    ASSERT_TRUE(fs::exists(file)) << file << " missing; run with UPDATE_GOLDEN=1";
    EXPECT_EQ(text, testing::read_text(file)) << req.name;
  }
}

TEST_F(ServiceTest, ManifestHidesFilesystemPaths) {
  const Response r = get(open(), "/api/manifest");
  ASSERT_EQ(r.status, 200);
  EXPECT_EQ(r.body.find(dir_->path().string()), std::string::npos);
  const json j = json::parse(r.body);
  EXPECT_EQ(j["K"], 8);
  EXPECT_EQ(j["datasets"].size(), 2u);
}

TEST_F(ServiceTest, ThresholdQueryMatchesDirectRelabelling) {
  const InspectionService s = open();
  for (double t : {0.5, 0.6, 0.8, 0.95}) {
    const json j = json::parse(get(s, "/api/prototypes?limit=1000&threshold=" + std::to_string(t)).body);
    for (const auto& p : j["items"]) {
      const int id = p["prototype_id"];
      SpecificityOptions o;
      o.threshold = t;
      EXPECT_EQ(p["label"].get<std::string>(), specificity(s.index(), id, o).label) << "t=" << t << " p=" << id;
    }
  }
}

TEST_F(ServiceTest, LabelFilterReturnsOnlyThatLabel) {
  const InspectionService s = open();
  const json all = json::parse(get(s, "/api/prototypes?limit=1000").body);
  std::map<std::string, int> counts;
  for (const auto& p : all["items"]) ++counts[p["label"].get<std::string>()];
  for (const auto& [label, n] : counts) {
    const json f = json::parse(get(s, "/api/prototypes?limit=1000&label=" + label).body);
    EXPECT_EQ(static_cast<int>(f["items"].size()), n) << label;
  }
}

TEST_F(ServiceTest, AttentionOverlayIsCachedOnDisk) {
  TempDir cache("cache");
  const InspectionService s = open(cache.path());
  const std::string url = "/api/prototypes/" + std::to_string(fixture_->busiest_prototype) + "/attention/" +
                          fixture_->sample_image_id + "?dataset=A";
  const Response first = get(s, url);
  ASSERT_EQ(first.status, 200);
  EXPECT_EQ(first.content_type, "image/png");
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(cache.path())) files += e.is_regular_file();
  EXPECT_EQ(files, 1u);
  EXPECT_EQ(get(s, url).body, first.body);
}

TEST_F(ServiceTest, MismatchedCheckpointIsRejected) {
  TempDir other("other");
  TrainConfig cfg;
  cfg.prototypes = 8;
  cfg.head_hidden_dim = cfg.head_bottleneck_dim = cfg.head_output_dim = 8;
  cfg.seed = 99;
  const Trainer t(cfg, load_pretrained("toy-vit-s8-d16-l1-h2,seed=3"));
  save_checkpoint(other / "x.ckpt", t.checkpoint(0));
  EXPECT_THROW(InspectionService::open(fixture_->index_dir, other / "x.ckpt", fixture_->report_dir / "report.json"),
               Error);
}

TEST_F(ServiceTest, OnlyGetIsAllowed) {
  EXPECT_EQ(open().handle("POST", "/api/manifest").status, 405);
}

TEST_F(ServiceTest, HttpServerServesCorsHeadersAndStops) {
  const InspectionService s = open();
  std::atomic<bool> stop{false};
  std::atomic<int> port{0};
  ServeOptions o;
  o.port = 0;
  o.stop = &stop;
  o.on_listen = [&](int p) { port = p; };
  std::thread server([&] { serve(s, o); });
  while (port == 0) std::this_thread::sleep_for(std::chrono::milliseconds(5));
  httplib::Client client("127.0.0.1", port);
  auto res = client.Get("/api/manifest");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 200);
  EXPECT_EQ(res->get_header_value("Access-Control-Allow-Origin"), "*");
  EXPECT_EQ(res->body, get(s, "/api/manifest").body);
  auto opt = client.Options("/api/manifest");
  ASSERT_TRUE(opt);
  EXPECT_EQ(opt->status, 204);
  stop = true;
  server.join();
}

TEST(BindAddress, Parsing) {
  EXPECT_EQ(parse_bind_address("0.0.0.0:9000"), (std::pair<std::string, int>{"0.0.0.0", 9000}));
  EXPECT_EQ(parse_bind_address(":8080").first, "127.0.0.1");
  EXPECT_EQ(parse_bind_address("8081").second, 8081);
  EXPECT_THROW(parse_bind_address("host:port"), ContractError);
  EXPECT_THROW(parse_bind_address("h:70000"), ContractError);
}

}  // namespace
}  // namespace protosim
