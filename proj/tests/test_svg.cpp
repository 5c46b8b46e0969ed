#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "maxrm/svg.hpp"

using namespace maxrm;

namespace {

std::string slurp(const std::string& path) {
    std::ifstream in(path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("bar charts are well-formed svg", "[svg]") {
    const std::string path = "/tmp/maxrm_test_bar.svg";
    write_bar_svg(path, "risks & methods", "max MSE", {"rf", "posthoc", "<odd>"},
                  {24.9, 16.8, 18.1}, {0.4, 0.3, 0.5});
    const std::string svg = slurp(path);
    std::remove(path.c_str());

    REQUIRE(svg.find("<svg") != std::string::npos);
    REQUIRE(svg.find("</svg>") != std::string::npos);
    REQUIRE(svg.find("rf") != std::string::npos);
    REQUIRE(svg.find("posthoc") != std::string::npos);
    // markup characters in labels and titles must be escaped
    REQUIRE(svg.find("<odd>") == std::string::npos);
    REQUIRE(svg.find("&lt;odd&gt;") != std::string::npos);
    REQUIRE(svg.find("&amp;") != std::string::npos);
    REQUIRE(svg.find("rect") != std::string::npos);

    REQUIRE_THROWS_AS(write_bar_svg(path, "t", "y", {}, {}, {}), ConfigError);
    REQUIRE_THROWS_AS(write_bar_svg(path, "t", "y", {"a"}, {1.0, 2.0}, {}), ConfigError);
    REQUIRE_THROWS_AS(write_bar_svg(path, "t", "y", {"a"}, {1.0}, {0.1, 0.2}), ConfigError);
}

TEST_CASE("line charts render every series", "[svg]") {
    const std::string path = "/tmp/maxrm_test_line.svg";
    SvgSeries a{"alpha", {1, 2, 3}, {0.5, 0.4, 0.3}, {0.1, 0.1, 0.1}};
    SvgSeries b{"beta", {1, 2, 3}, {0.6, 0.5, 0.2}, {}};
    write_line_svg(path, "excess", "n", "median", {a, b});
    const std::string svg = slurp(path);
    std::remove(path.c_str());

    REQUIRE(svg.find("</svg>") != std::string::npos);
    REQUIRE(svg.find("alpha") != std::string::npos);
    REQUIRE(svg.find("beta") != std::string::npos);
    REQUIRE(svg.find("polyline") != std::string::npos);

    REQUIRE_THROWS_AS(write_line_svg(path, "t", "x", "y", {}), ConfigError);
    SvgSeries bad{"bad", {1, 2}, {1.0}, {}};
    REQUIRE_THROWS_AS(write_line_svg(path, "t", "x", "y", {bad}), ConfigError);
}

TEST_CASE("axis steps land on round values", "[svg]") {
    REQUIRE(detail::nice_step(10.0, 5) == Catch::Approx(2.0));
    REQUIRE(detail::nice_step(1.0, 5) == Catch::Approx(0.2));
    REQUIRE(detail::nice_step(50.0, 5) == Catch::Approx(10.0));
    REQUIRE(detail::nice_step(0.7, 5) == Catch::Approx(0.2));  // 0.14 rounds up
}
