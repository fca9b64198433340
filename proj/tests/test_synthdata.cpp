#include <Eigen/Dense>
#include <cstdio>
#include <string>
#include <vector>

#include "doctest.h"
#include "ldit/errors.hpp"
#include "ldit/metrics.hpp"
#include "ldit/synthdata.hpp"

using namespace ldit;

namespace {

struct TempFile {
    std::string path;
    explicit TempFile(const std::string& name) : path("/tmp/ldit_test_" + name) {}
    ~TempFile() { std::remove(path.c_str()); }
};

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
    const std::size_t n = x.size();
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < n; ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= double(n);
    my /= double(n);
    double sxx = 0, syy = 0, sxy = 0;
    for (std::size_t i = 0; i < n; ++i) {
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
        sxy += (x[i] - mx) * (y[i] - my);
    }
    return sxy / std::sqrt(sxx * syy);
}

// R^2 of ordinary least squares b ~ [1, features...]
double r_squared(const std::vector<std::vector<double>>& features, const std::vector<double>& b) {
    const int n = int(b.size());
    const int k = int(features.size());
    Eigen::MatrixXd X(n, k + 1);
    Eigen::VectorXd y(n);
    for (int i = 0; i < n; ++i) {
        X(i, 0) = 1.0;
        for (int j = 0; j < k; ++j) X(i, j + 1) = features[size_t(j)][size_t(i)];
        y(i) = b[size_t(i)];
    }
    Eigen::VectorXd beta = (X.transpose() * X).ldlt().solve(X.transpose() * y);
    const double ss_res = (y - X * beta).squaredNorm();
    const double mean = y.mean();
    const double ss_tot = (y.array() - mean).matrix().squaredNorm();
    return 1.0 - ss_res / ss_tot;
}

}  // namespace

TEST_SUITE("synthdata") {

    TEST_CASE("generation is deterministic") {
        GenCfg cfg;
        cfg.n = 20;
        cfg.seed = 7;
        Dataset a = generate_dataset(cfg);
        Dataset b = generate_dataset(cfg);
        REQUIRE(a.subjects.size() == 20);
        for (std::size_t i = 0; i < a.subjects.size(); ++i) {
            CHECK(a.subjects[i].burden == b.subjects[i].burden);
            CHECK(a.subjects[i].split == b.subjects[i].split);
            CHECK((a.subjects[i].x.data == b.subjects[i].x.data).all());
            CHECK((a.subjects[i].y.data == b.subjects[i].y.data).all());
        }
        CHECK(a.source_norm.mean == b.source_norm.mean);
        CHECK(a.target_norm.stddev == b.target_norm.stddev);

        // different seed -> different volumes
        cfg.seed = 8;
        Dataset c = generate_dataset(cfg);
        CHECK(!(a.subjects[0].x.data == c.subjects[0].x.data).all());
    }

    TEST_CASE("splits are sized, disjoint, and exhaustive") {
        GenCfg cfg;
        cfg.n = 100;
        cfg.seed = 3;
        Dataset ds = generate_dataset(cfg);
        auto tr = ds.split_indices(SplitId::train);
        auto va = ds.split_indices(SplitId::val);
        auto te = ds.split_indices(SplitId::test);
        CHECK(tr.size() == 80);
        CHECK(va.size() == 5);
        CHECK(te.size() == 15);
        std::vector<int> seen(100, 0);
        for (int i : tr) ++seen[size_t(i)];
        for (int i : va) ++seen[size_t(i)];
        for (int i : te) ++seen[size_t(i)];
        for (int s : seen) CHECK(s == 1);

        // shuffled assignment: the train split is not simply the first 80 ids
        bool contiguous = true;
        for (std::size_t i = 0; i < tr.size(); ++i) contiguous &= (tr[i] == int(i));
        CHECK(!contiguous);
    }

    TEST_CASE("region masks are nonempty and disjoint") {
        FieldParams fp;
        auto cortex = make_cortex_mask(Shape::grid(1, 64, 64), fp);
        auto hippo = make_hippo_mask(Shape::grid(1, 64, 64), fp);
        CHECK(cortex.data.sum() > 0);
        CHECK(hippo.data.sum() > 0);
        CHECK((cortex.data * hippo.data).sum() == 0.0f);

        auto cortex3 = make_cortex_mask(Shape::grid(32, 32, 32), fp);
        auto hippo3 = make_hippo_mask(Shape::grid(32, 32, 32), fp);
        CHECK(cortex3.data.sum() > 0);
        CHECK(hippo3.data.sum() > 0);
        CHECK((cortex3.data * hippo3.data).sum() == 0.0f);
    }

    TEST_CASE("config validation") {
        GenCfg cfg;
        cfg.n = 10;
        CHECK_THROWS_AS(generate_dataset(cfg), config_error);
        cfg.n = 40;
        cfg.grid = Shape::grid(1, 48, 48);
        CHECK_THROWS_AS(generate_dataset(cfg), config_error);
        cfg.grid = Shape::grid(16, 16, 16);
        CHECK_THROWS_AS(generate_dataset(cfg), config_error);
        cfg.grid = Shape::grid(1, 64, 64);
        cfg.f_val = 0.0;
        cfg.f_test = 0.20;
        CHECK_THROWS_AS(generate_dataset(cfg), config_error);
    }

    TEST_CASE("construction invariants: burden recoverability and weak source") {
        GenCfg cfg;  // defaults: n=200, 64x64, seed 42
        Dataset ds = generate_dataset(cfg);

        std::vector<double> b, y_cortex, x_cortex, x_hippo;
        for (const auto& s : ds.subjects) {
            b.push_back(s.burden);
            y_cortex.push_back(metrics::roi_mean(s.y, ds.cortex_mask));
            x_cortex.push_back(metrics::roi_mean(s.x, ds.cortex_mask));
            x_hippo.push_back(metrics::roi_mean(s.x, ds.hippo_mask));
        }

        // target cortical ROI mean is engineered to be affine in burden
        const double rho = pearson(y_cortex, b);
        CAPTURE(rho);
        CHECK(rho >= 0.95);
        const double r2_y = r_squared({y_cortex}, b);
        CAPTURE(r2_y);
        CHECK(r2_y >= 0.9);

        // source ROI means carry some, but only weak, burden information
        const double r2_x = r_squared({x_cortex, x_hippo}, b);
        CAPTURE(r2_x);
        CHECK(r2_x >= 0.1);
        CHECK(r2_x <= 0.9);

        // class balance: roughly 61% positive at uniform burden sampling
        int positives = 0;
        for (const auto& s : ds.subjects) {
            CHECK(s.positive == (s.burden > 1.11));
            positives += s.positive ? 1 : 0;
        }
        CHECK(positives > 100);
        CHECK(positives < 145);
    }

    TEST_CASE("standardization uses train statistics and round-trips") {
        GenCfg cfg;
        cfg.n = 30;
        cfg.seed = 11;
        Dataset ds = generate_dataset(cfg);
        Dataset raw = ds;  // keep a copy in raw intensity

        standardize(ds);
        CHECK(ds.intensity == "standardized");

        double sum = 0, sumsq = 0;
        std::int64_t cnt = 0;
        for (const auto& s : ds.subjects) {
            if (s.split != SplitId::train) continue;
            sum += s.x.data.cast<double>().sum();
            sumsq += s.x.data.cast<double>().square().sum();
            cnt += s.x.size();
        }
        const double mean = sum / double(cnt);
        const double var = sumsq / double(cnt) - mean * mean;
        CHECK(mean == doctest::Approx(0.0).epsilon(1e-6));
        CHECK(std::abs(mean) < 1e-6);
        CHECK(var == doctest::Approx(1.0).epsilon(1e-5));

        // idempotent: second call is a no-op
        const float probe = ds.subjects[0].x.data[0];
        standardize(ds);
        CHECK(ds.subjects[0].x.data[0] == probe);

        // inverse transform returns to raw intensities
        Tensor<float> back = denormalize(ds.subjects[0].x, ds.source_norm);
        CHECK((back.data - raw.subjects[0].x.data).abs().maxCoeff() < 1e-5f);

        Dataset nostats;
        nostats.has_target = false;
        nostats.subjects.resize(1);
        nostats.subjects[0].x = Tensor<float>(Shape::grid(1, 4, 4));
        nostats.subjects[0].x.data.setZero();
        CHECK_THROWS_AS(standardize(nostats), std::invalid_argument);
    }

    TEST_CASE("container round trip is bit-exact") {
        TempFile f("dataset.ccds");
        GenCfg cfg;
        cfg.n = 20;
        cfg.seed = 5;
        Dataset ds = generate_dataset(cfg);
        dsio::save(f.path, ds);
        Dataset rt = dsio::load(f.path);

        CHECK(rt.grid == ds.grid);
        CHECK(rt.seed == ds.seed);
        CHECK(rt.has_masks);
        CHECK(rt.has_target);
        CHECK(rt.intensity == "raw");
        CHECK(rt.source_norm.present);
        CHECK(rt.source_norm.mean == ds.source_norm.mean);
        CHECK(rt.target_norm.stddev == ds.target_norm.stddev);
        CHECK((rt.cortex_mask.data == ds.cortex_mask.data).all());
        CHECK((rt.hippo_mask.data == ds.hippo_mask.data).all());
        REQUIRE(rt.subjects.size() == ds.subjects.size());
        for (std::size_t i = 0; i < ds.subjects.size(); ++i) {
            CHECK(rt.subjects[i].id == ds.subjects[i].id);
            CHECK(rt.subjects[i].split == ds.subjects[i].split);
            CHECK(rt.subjects[i].burden == ds.subjects[i].burden);
            CHECK(rt.subjects[i].positive == ds.subjects[i].positive);
            CHECK((rt.subjects[i].x.data == ds.subjects[i].x.data).all());
            CHECK((rt.subjects[i].y.data == ds.subjects[i].y.data).all());
        }
    }

    TEST_CASE("prediction container: no masks, no target") {
        TempFile f("preds.ccds");
        Dataset preds;
        preds.grid = Shape::grid(1, 8, 8);
        preds.seed = 1;
        preds.has_masks = false;
        preds.has_target = false;
        preds.intensity = "raw";
        preds.subjects.resize(2);
        Rng rng(4);
        for (int i = 0; i < 2; ++i) {
            preds.subjects[size_t(i)].id = i;
            preds.subjects[size_t(i)].split = SplitId::test;
            preds.subjects[size_t(i)].burden = 1.0 + i;
            preds.subjects[size_t(i)].x = Tensor<float>(preds.grid);
            fill_randn(preds.subjects[size_t(i)].x, rng);
        }
        dsio::save(f.path, preds);
        Dataset rt = dsio::load(f.path);
        CHECK(!rt.has_masks);
        CHECK(!rt.has_target);
        REQUIRE(rt.subjects.size() == 2);
        CHECK((rt.subjects[1].x.data == preds.subjects[1].x.data).all());
        CHECK(rt.subjects[1].y.size() == 0);
    }

    TEST_CASE("container corruption is rejected") {
        TempFile f("corrupt.ccds");
        GenCfg cfg;
        cfg.n = 20;
        cfg.seed = 6;
        Dataset ds = generate_dataset(cfg);
        dsio::save(f.path, ds);
        const std::string good = io::read_file(f.path);

        std::string bad = good;
        bad.back() = char(bad.back() ^ 0x10);
        io::write_file(f.path, bad);
        CHECK_THROWS_WITH_AS(dsio::load(f.path), doctest::Contains("checksum"), format_error);

        io::write_file(f.path, good.substr(0, good.size() / 2));
        CHECK_THROWS_AS(dsio::load(f.path), format_error);

        std::string magic = good;
        magic[1] = 'X';
        io::write_file(f.path, magic);
        CHECK_THROWS_WITH_AS(dsio::load(f.path), doctest::Contains("magic"), format_error);

        // unknown header key: splice a bogus line into the header and fix lengths
        std::string hdr = good;
        const std::string insert = "bogus_key: 1\n";
        std::uint64_t hsize;
        std::memcpy(&hsize, hdr.data() + 8, 8);
        hdr.insert(16, insert);
        hsize += insert.size();
        std::memcpy(hdr.data() + 8, &hsize, 8);
        io::write_file(f.path, hdr);
        CHECK_THROWS_WITH_AS(dsio::load(f.path), doctest::Contains("bogus_key"), format_error);
    }
}
