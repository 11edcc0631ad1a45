# Config package for the pilot-wave laboratory
