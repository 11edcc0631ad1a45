# Models package for the pilot-wave laboratory
