#pragma once

// Shared schemas and interactions for the unit and acceptance tests.

#include <string>

#include "hiesql/schema.hpp"
#include "json.hpp"

namespace fixtures {

inline hiesql::Schema course_teach() {
  return hiesql::load_schema(nlohmann::json::parse(R"({
    "db_id": "course_teach",
    "tables": [
      {"name": "course", "columns": [{"name": "Course_ID", "type": "number"}, {"name": "Staring_Date", "type": "text"},
                                     {"name": "Course", "type": "text"}]},
      {"name": "teacher", "columns": [{"name": "Teacher_ID", "type": "number"}, {"name": "Name", "type": "text"},
                                      {"name": "Age", "type": "text"}, {"name": "Hometown", "type": "text"}]},
      {"name": "course_arrange", "columns": [{"name": "Course_ID", "type": "number"}, {"name": "Teacher_ID", "type": "number"},
                                             {"name": "Grade", "type": "number"}]}
    ],
    "primary_keys": [["course", "Course_ID"], ["teacher", "Teacher_ID"], ["course_arrange", "Course_ID"]],
    "foreign_keys": [{"from": ["course_arrange", "Teacher_ID"], "to": ["teacher", "Teacher_ID"]},
                     {"from": ["course_arrange", "Course_ID"], "to": ["course", "Course_ID"]}]
  })"));
}

inline hiesql::Schema cartoon() {
  return hiesql::load_schema(nlohmann::json::parse(R"({
    "db_id": "tvshow",
    "tables": [
      {"name": "TV_Channel", "columns": [{"name": "id"}, {"name": "series_name"}, {"name": "Country"}, {"name": "Language"}]},
      {"name": "Cartoon", "columns": [{"name": "id"}, {"name": "Title"}, {"name": "Directed_by"}, {"name": "Original_air_date"},
                                      {"name": "Production_code"}, {"name": "Channel"}]}
    ],
    "primary_keys": [["TV_Channel", "id"], ["Cartoon", "id"]],
    "foreign_keys": [{"from": ["Cartoon", "Channel"], "to": ["TV_Channel", "id"]}]
  })"));
}

// Interaction from the course_teach example: three turns whose later queries
// depend on the first utterance.
inline const char* kCourseTurns[3][2] = {
    {"List the name of the teachers and the courses assigned for them to teach.",
     "SELECT T3.Name, T2.Course FROM course_arrange AS T1 JOIN course AS T2 ON T1.Course_ID = T2.Course_ID "
     "JOIN teacher AS T3 ON T1.Teacher_ID = T3.Teacher_ID"},
    {"Arrange this list with the teachers name in ascending order",
     "SELECT T3.Name, T2.Course FROM course_arrange AS T1 JOIN course AS T2 ON T1.Course_ID = T2.Course_ID "
     "JOIN teacher AS T3 ON T1.Teacher_ID = T3.Teacher_ID ORDER BY T3.Name ASC"},
    {"Include teachers ID in tha same list",
     "SELECT T3.Name, T2.Course, T3.Teacher_ID FROM course_arrange AS T1 JOIN course AS T2 ON T1.Course_ID = T2.Course_ID "
     "JOIN teacher AS T3 ON T1.Teacher_ID = T3.Teacher_ID ORDER BY T3.Name ASC"},
};

inline const char* kCartoonTurns[4][2] = {
    {"Which cartoon aired first?", "SELECT title FROM cartoon ORDER BY original_air_date asc LIMIT 1"},
    {"What was the last cartoon to air?", "SELECT title FROM cartoon ORDER BY original_air_date desc LIMIT 1"},
    {"What channel was it on?", "SELECT channel FROM cartoon ORDER BY original_air_date desc LIMIT 1"},
    {"What is the production code?", "SELECT production_code FROM cartoon ORDER BY original_air_date desc LIMIT 1"},
};

}  // namespace fixtures
